#include "partseg/types.hpp"

#include "partseg/error.hpp"

namespace partseg {

uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed * 0x9E3779B97F4A7C15ull + index + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void validate_annotation(const PartAnnotation& ann) {
  require(ann.labels.defined() && ann.labels.dim() == 2, ErrorCode::shape_mismatch,
          "annotation must be a 2-D label tensor");
  require(ann.labels.scalar_type() == torch::kUInt8, ErrorCode::invalid_argument,
          "annotation labels must be uint8");
  require(ann.n_classes >= 2 && ann.n_classes < kIgnoreLabel, ErrorCode::invalid_argument,
          "annotation n_classes must be in [2, 255)");
  auto flat = ann.labels.contiguous();
  const uint8_t* p = flat.data_ptr<uint8_t>();
  for (int64_t i = 0; i < flat.numel(); ++i) {
    if (p[i] != kIgnoreLabel && p[i] >= ann.n_classes)
      fail(ErrorCode::invalid_argument, "annotation value " + std::to_string(p[i]) +
                                            " outside [0, " + std::to_string(ann.n_classes) +
                                            ") and not ignore");
  }
}

torch::Tensor resize_labels_nearest(const torch::Tensor& labels, Resolution target) {
  const int64_t h = labels.size(0), w = labels.size(1);
  if (h == target.height && w == target.width) return labels;
  // Pixel-centre nearest neighbour: src = floor((dst + 0.5) * src_size / dst_size).
  auto ys = ((torch::arange(target.height, torch::kFloat64) + 0.5) * h / target.height)
                .floor()
                .clamp_max(h - 1)
                .to(torch::kLong);
  auto xs = ((torch::arange(target.width, torch::kFloat64) + 0.5) * w / target.width)
                .floor()
                .clamp_max(w - 1)
                .to(torch::kLong);
  return labels.index_select(0, ys).index_select(1, xs).contiguous();
}

}  // namespace partseg
