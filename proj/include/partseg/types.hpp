#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace partseg {

inline constexpr uint8_t kIgnoreLabel = 255;

struct Resolution {
  int64_t height = 0;
  int64_t width = 0;

  friend bool operator==(const Resolution&, const Resolution&) = default;
};

// Integer part-label mask, uint8 (H, W). Values are class ids in
// [0, n_classes) or kIgnoreLabel.
struct PartAnnotation {
  torch::Tensor labels;
  int n_classes = 2;
  std::vector<std::string> class_names;

  int64_t height() const { return labels.size(0); }
  int64_t width() const { return labels.size(1); }
  Resolution resolution() const { return {height(), width()}; }
};

// Throws invalid_argument naming the first offending value.
void validate_annotation(const PartAnnotation& ann);

// Raw per-pixel class scores, float32 (n_classes, H, W). Never softmaxed.
struct LogitMap {
  torch::Tensor scores;

  int64_t n_classes() const { return scores.size(0); }
  int64_t height() const { return scores.size(1); }
  int64_t width() const { return scores.size(2); }
};

// Derives an independent stream seed for item `index` (splitmix64).
uint64_t mix_seed(uint64_t seed, uint64_t index);

// Nearest-neighbour label resampling (labels are categorical).
torch::Tensor resize_labels_nearest(const torch::Tensor& labels, Resolution target);

}  // namespace partseg
