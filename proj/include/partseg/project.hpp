#pragma once

// A project directory: one declarative config file plus every artifact the
// pipeline stages produce. Layout under the root:
//   project.json, models/, samples/{registry.json,images,latents,masks},
//   distill/, reports/, predictions/

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "partseg/datasets.hpp"
#include "partseg/distillation.hpp"
#include "partseg/gan_backbone.hpp"
#include "partseg/inversion.hpp"
#include "partseg/layer_selection.hpp"
#include "partseg/segmenters.hpp"

namespace partseg {

struct ClassEntry {
  std::string name;
  std::array<uint8_t, 3> color{0, 0, 0};
};

struct ProjectConfig {
  std::string dataset_root = "dataset";
  std::string generator_checkpoint = "models/generator.psta";
  LayerSelection layer_selection = LayerSelection::all();
  std::vector<ClassEntry> classes;
  SyntheticPartsConfig dataset;
  ToyGanTrainConfig gan;
  uint64_t gan_seed = 0;
  SegmenterVariant fewshot_arch = SegmenterVariant::CNN_DEFAULT;
  FewShotTrainConfig fewshot;
  InversionConfig inversion;
  int64_t unet_base_channels = 64;
  AutoShotTrainConfig autoshot;
  AugmentationConfig augmentation;
  uint64_t seed = 0;

  int n_classes() const { return static_cast<int>(classes.size()); }
  std::vector<std::array<uint8_t, 3>> palette() const;
};

// Toy parts classes with their display colours.
ProjectConfig default_project_config();

// Missing keys keep their defaults; unknown keys are rejected.
nlohmann::json config_to_json(const ProjectConfig& cfg);
ProjectConfig config_from_json(const nlohmann::json& j);
void validate(const ProjectConfig& cfg);

struct SampleRecord {
  std::string id;
  uint64_t seed = 0;
};

std::string sample_id(int64_t index);

class Project {
 public:
  // Writes project.json (overwriting) and creates the directory layout.
  static Project init(const std::filesystem::path& root, const ProjectConfig& cfg);
  // Reads `config_file`, or root/project.json when empty.
  static Project open(const std::filesystem::path& root,
                      const std::filesystem::path& config_file = {});

  const std::filesystem::path& root() const { return root_; }
  const ProjectConfig& config() const { return cfg_; }

  std::filesystem::path config_path() const { return root_ / "project.json"; }
  std::filesystem::path dataset_dir() const;
  std::filesystem::path generator_path() const;
  std::filesystem::path fewshot_model_path() const { return root_ / "models/fewshot.psta"; }
  std::filesystem::path autoshot_model_path() const { return root_ / "models/autoshot.psta"; }
  std::filesystem::path supervised_model_path() const { return root_ / "models/supervised.psta"; }
  std::filesystem::path registry_path() const { return root_ / "samples/registry.json"; }
  std::filesystem::path image_path(const std::string& id) const;
  std::filesystem::path latent_path(const std::string& id) const;
  std::filesystem::path mask_path(const std::string& id) const;
  std::filesystem::path representation_path(const std::string& id) const;
  std::filesystem::path distill_dir() const { return root_ / "distill"; }
  std::filesystem::path reports_dir() const { return root_ / "reports"; }
  std::filesystem::path predictions_dir() const { return root_ / "predictions"; }

  std::vector<SampleRecord> samples() const;  // empty when no registry yet
  std::optional<SampleRecord> find_sample(const std::string& id) const;
  void write_registry(const std::vector<SampleRecord>& records) const;
  bool has_mask(const std::string& id) const;
  std::vector<std::string> annotated_ids() const;

 private:
  Project(std::filesystem::path root, ProjectConfig cfg);

  std::filesystem::path root_;
  ProjectConfig cfg_;
};

}  // namespace partseg
