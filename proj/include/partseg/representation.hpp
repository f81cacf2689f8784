#pragma once

// Pixel-wise representation: every selected activation map is bilinearly
// resampled to a common resolution and the maps are concatenated along the
// channel axis, so each pixel gets a C = sum(c_i) dimensional feature.

#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "partseg/gan_backbone.hpp"
#include "partseg/layer_selection.hpp"
#include "partseg/tensor_archive.hpp"
#include "partseg/types.hpp"

namespace partseg {

struct ChannelSpan {
  int layer_id = 0;
  int64_t start = 0;
  int64_t length = 0;
};

struct PixelRepresentation {
  torch::Tensor values;  // float32 (C, H_r, W_r)
  std::vector<ChannelSpan> channel_offsets;
  LayerSelection source_selection;

  int64_t channels() const { return values.size(0); }
  int64_t height() const { return values.size(1); }
  int64_t width() const { return values.size(2); }
  Resolution resolution() const { return {height(), width()}; }
};

struct ExtractOptions {
  std::optional<Resolution> target_res;
  // Permit target_res below a selected map's resolution.
  bool allow_downscale = false;
};

// Entries are matched by layer id, so the stack's insertion order is irrelevant.
PixelRepresentation extract_representation(const ActivationStack& stack, const LayerSelection& sel,
                                           const ExtractOptions& opts = {});

// Batched form over generate_batch output: acts[i] is (N, c_i, h_i, w_i) for
// layers `infos[i]`. Returns (N, C, H_r, W_r).
torch::Tensor extract_batch(const std::vector<torch::Tensor>& acts,
                            const std::vector<LayerInfo>& infos, const ExtractOptions& opts = {});

// Bilinear, half-pixel centres, no corner alignment. (c,h,w) -> (c,H,W).
torch::Tensor resample_bilinear(const torch::Tensor& map, Resolution target);

// Feature vector at column x, row y.
torch::Tensor pixel_feature(const PixelRepresentation& rep, int64_t x, int64_t y);

// Optional per-channel standardisation fitted on training representations.
struct ChannelStats {
  torch::Tensor mean;  // (C,)
  torch::Tensor std;   // (C,), floored
};

ChannelStats fit_channel_stats(std::span<const PixelRepresentation> reps);
torch::Tensor apply_channel_stats(const torch::Tensor& values, const ChannelStats& stats);

// Spill format: tensor archive with a `representation` manifest.
TensorArchive representation_archive(const PixelRepresentation& rep);
PixelRepresentation representation_from_archive(const TensorArchive& archive);

}  // namespace partseg
