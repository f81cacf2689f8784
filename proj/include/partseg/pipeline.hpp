#pragma once

// Pipeline stages over a Project. Each stage reads its prerequisites from the
// project root, writes its artifacts there, and is deterministic in
// (config, arguments), so re-running overwrites outputs identically.

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "partseg/evaluation.hpp"
#include "partseg/project.hpp"

namespace partseg {

using StageProgress = std::function<void(const std::string& stage, int done, int total)>;

// Writes the synthetic parts dataset (images/, masks/) under dataset_root.
int64_t make_dataset(const Project& project);
PartsDataset load_dataset(const Project& project, int64_t limit = -1);

void train_gan(const Project& project, const StageProgress& progress = {});
GeneratorHandle require_generator(const Project& project);

// Replaces the registry with n samples drawn from mix_seed(seed, i). Masks of
// ids that keep their seed survive; others are removed.
std::vector<SampleRecord> gen_samples(const Project& project, int64_t n, uint64_t seed);

// Writes palette-derived ground-truth masks for the first `count` samples.
std::vector<std::string> auto_annotate(const Project& project, int64_t count);

// Encodes with the project palette; validates values and resolution first.
void store_mask(const Project& project, const std::string& id, const PartAnnotation& ann);
PartAnnotation load_mask(const Project& project, const std::string& id);

// Representation of a registered sample at the generator output resolution.
PixelRepresentation sample_representation(const Project& project, const GeneratorHandle& gen,
                                          const std::string& id,
                                          const std::optional<LayerSelection>& sel = {});

// Writes samples/reps/<id>.psta for every registered sample (or just `ids`).
std::vector<std::string> extract_representations(const Project& project,
                                                 const LayerSelection& sel,
                                                 const std::vector<std::string>& ids = {});

struct InvertOutcome {
  InversionResult result;
  std::filesystem::path latent_path;
  std::filesystem::path trace_path;
};

InvertOutcome invert_image_file(const Project& project, const std::filesystem::path& image,
                                std::optional<int> steps, const std::string& name);

struct FewShotOutcome {
  SegmenterModel model;
  FewShotTrace trace;
  std::vector<std::string> used_ids;
};

// Trains on the first `shots` annotated samples (all when shots <= 0).
// Throws precondition "no annotations" when none exist.
FewShotOutcome train_fewshot_stage(const Project& project,
                                   std::optional<SegmenterVariant> arch = {}, int shots = 0,
                                   const EpochCallback& on_epoch = {});

struct Prediction {
  LogitMap logits;
  PartAnnotation mask;
  Image confidence;  // grey level = top-class softmax probability
  std::vector<double> class_confidence;  // mean probability where the class wins
  std::string model;  // fewshot | untrained | autoshot
};

Prediction make_prediction(const LogitMap& logits, const std::string& model_name);

// Few-shot model when trained, otherwise a freshly initialised one.
SegmenterModel current_fewshot_model(const Project& project, const GeneratorHandle& gen);

Prediction predict_sample(const Project& project, const std::string& id);
// Uses the auto-shot UNet when `fast` and one exists, otherwise inverts the
// image (`steps` overrides the configured budget) and applies the few-shot model.
Prediction predict_image(const Project& project, const Image& image, bool fast,
                         std::optional<int> steps = {});

// Writes predictions/<name>_mask.png and <name>_confidence.png.
void write_prediction(const Project& project, const Prediction& p, const std::string& name);

std::vector<DistilledSample> gen_distill(const Project& project, int64_t n, uint64_t seed);

AutoShotTrace train_autoshot_stage(const Project& project, std::optional<TargetMode> mode = {},
                                   const EpochLossFn& on_epoch = {});
AutoShotTrace train_supervised_stage(const Project& project, int64_t labels,
                                     const EpochLossFn& on_epoch = {});

enum class EvalModel { fewshot, autoshot, supervised };
EvalModel parse_eval_model(const std::string& text);

// Scores a model on `n` held-out generated samples (seeds mix_seed(seed, i))
// against their palette ground truth; writes reports/eval_<model>.json.
// With `per_image` the report also lists each sample's own weighted IOU.
nlohmann::json evaluate_stage(const Project& project, EvalModel which, int n, uint64_t seed,
                              bool exclude_background, bool per_image = false);

}  // namespace partseg
