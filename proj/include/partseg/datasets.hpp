#pragma once

// Desk-scale synthetic parts data with exact ground truth, plus the
// annotation and manifest file formats shared by the other modules.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "partseg/image_io.hpp"
#include "partseg/types.hpp"

namespace partseg {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

// Sizes are fractions of the image side.
struct SyntheticPartsConfig {
  int64_t resolution = 32;
  int n_classes = 4;  // background, body, head, tail
  Range body_half_length{0.22, 0.30};
  Range body_half_width{0.13, 0.18};
  Range head_radius{0.10, 0.14};
  Range tail_half_length{0.10, 0.14};
  Range tail_half_width{0.05, 0.07};
  double position_jitter = 0.15;
  double rotation_jitter_deg = 180.0;
  double color_jitter = 0.08;
  double pixel_noise = 0.03;
  // Head takes the body colour: the head/body boundary becomes invisible.
  // Palette labelling cannot recover the head then, see label_by_palette.
  bool same_color_parts = false;
  int64_t dataset_size = 1000;
  uint64_t rng_seed = 0;
};

struct PartsDataset {
  std::vector<Image> images;
  std::vector<PartAnnotation> masks;

  size_t size() const { return images.size(); }
};

void validate_config(const SyntheticPartsConfig& cfg);

// One sample, a pure function of (cfg, sample_seed).
std::pair<Image, PartAnnotation> render_synthetic_sample(const SyntheticPartsConfig& cfg,
                                                         uint64_t sample_seed);

// Sample i uses seed mix(cfg.rng_seed, i).
PartsDataset make_synthetic_parts_dataset(const SyntheticPartsConfig& cfg);

// Upper bound on each class's pixel fraction implied by the config's size
// ranges (index 0 is a lower bound on the background fraction instead).
std::vector<double> class_fraction_bounds(const SyntheticPartsConfig& cfg);

// Class colour prototypes (RGB in [0,1]); index 0 is the background axis.
std::vector<std::array<double, 3>> class_colors(int n_classes);
std::vector<std::array<uint8_t, 3>> display_palette(int n_classes);

// Labels any image rendered in the synthetic colour scheme, including GAN
// samples: low-chroma pixels are background, others take the nearest class
// colour prototype. This is the ground truth for generated toy images.
PartAnnotation label_by_palette(const Image& image, int n_classes);

// Indexed-palette PNG with pixel value = class id, 255 = ignore.
void save_annotation(const std::filesystem::path& path, const PartAnnotation& ann);
PartAnnotation load_annotation(const std::filesystem::path& path, int n_classes);
PartAnnotation decode_annotation(std::string_view png_bytes, int n_classes);

// Append-only JSON-lines manifest of (image, target) records; paths are
// relative to the dataset root.
struct ManifestRecord {
  int64_t id = 0;
  uint64_t seed = 0;
  std::string image_path;
  std::string target_path;
  std::string checksum;  // hex crc32 over image bytes followed by target bytes
  int n_classes = 0;
};

struct ManifestReadResult {
  std::vector<ManifestRecord> records;                  // verified records
  std::vector<std::pair<int64_t, std::string>> errors;  // (record id, reason)
};

std::string record_checksum(const std::filesystem::path& root, const ManifestRecord& rec);
void append_manifest(const std::filesystem::path& root, const ManifestRecord& rec);
// Verifies every record's checksum; bad records are reported, not returned.
ManifestReadResult read_manifest(const std::filesystem::path& root);
// As read_manifest but throws corrupt naming the first bad record.
std::vector<ManifestRecord> read_manifest_strict(const std::filesystem::path& root);

}  // namespace partseg
