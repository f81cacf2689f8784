#pragma once

// Few-shot segmenters over pixel representations: per-pixel MLPs and
// dilated CNNs, trained with per-pixel cross-entropy from 1-10 annotations.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "partseg/representation.hpp"
#include "partseg/tensor_archive.hpp"
#include "partseg/types.hpp"

namespace partseg {

enum class SegmenterVariant { MLP0, MLP1, MLP2, CNN_S, CNN_M, CNN_L, CNN_DEFAULT };

std::string to_string(SegmenterVariant v);
SegmenterVariant parse_variant(const std::string& text);

struct SegmenterSpec {
  SegmenterVariant variant = SegmenterVariant::CNN_DEFAULT;
  int64_t input_channels = 0;
  int64_t n_classes = 2;
};

struct ConvLayerShape {
  int64_t in_channels;
  int64_t out_channels;
  int64_t kernel;
  int64_t dilation;
  bool activation;  // leaky ReLU (CNN) or ReLU (MLP) after this layer
};

// Layer shapes fully determined by the spec. For MLPs every layer is a 1x1.
std::vector<ConvLayerShape> layer_shapes(const SegmenterSpec& spec);

// Chebyshev radius of the receptive field in pixels (0 for MLPs).
int64_t receptive_field_radius(const SegmenterSpec& spec);

class SegmenterNetImpl : public torch::nn::Module {
 public:
  explicit SegmenterNetImpl(const SegmenterSpec& spec);

  // (N, C, H, W) -> (N, n_classes, H, W) raw logits.
  torch::Tensor forward(torch::Tensor x);

  const SegmenterSpec& spec() const { return spec_; }

 private:
  torch::Tensor forward_mlp(const torch::Tensor& x);

  SegmenterSpec spec_;
  std::vector<ConvLayerShape> shapes_;
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::Linear> linears_;
};
TORCH_MODULE(SegmenterNet);

struct SegmenterModel {
  SegmenterNet net{nullptr};
  std::optional<ChannelStats> stats;

  const SegmenterSpec& spec() const { return net->spec(); }
};

// Seeded fan-in scaled initialisation.
SegmenterModel build_segmenter(const SegmenterSpec& spec, uint64_t seed = 0);

struct FewShotTrainConfig {
  int epochs = 1000;
  double base_lr = 1e-3;
  double lr_decay_factor = 10.0;
  int lr_decay_every = 50;
  double lr_floor = 1e-8;
  double weight_decay = 1e-3;
  bool standardize = false;
  uint64_t rng_seed = 0;
};

// base_lr * factor^-(floor(epoch / every)), floored at lr_floor.
double lr_at_epoch(const FewShotTrainConfig& cfg, int epoch);

struct TrainingPair {
  PixelRepresentation rep;
  PartAnnotation annotation;
};

struct FewShotTrace {
  std::vector<double> epoch_loss;  // mean loss over the epoch's steps
  std::vector<double> epoch_lr;
};

using EpochCallback = std::function<void(int epoch, int epochs, double loss)>;

// Adam, one full representation per step; each epoch visits every pair once
// in an order shuffled from cfg.rng_seed. Annotations at another resolution
// are resampled nearest-neighbour.
FewShotTrace train_fewshot(SegmenterModel& model, const std::vector<TrainingPair>& pairs,
                           const FewShotTrainConfig& cfg, const EpochCallback& on_epoch = {});

LogitMap predict(const SegmenterModel& model, const PixelRepresentation& rep);
// (N, C, H, W) -> (N, n, H, W); no grad.
torch::Tensor predict_batch(const SegmenterModel& model, const torch::Tensor& reps);

// Per-pixel argmax, ties to the lowest class index. Throws on non-finite input.
PartAnnotation logits_to_mask(const LogitMap& logits);

// Fraction of non-ignore pixels where argmax(prediction) equals the label.
double pixel_accuracy(const LogitMap& logits, const PartAnnotation& ann);

TensorArchive segmenter_archive(const SegmenterModel& model);
SegmenterModel segmenter_from_archive(const TensorArchive& archive);
void save_segmenter(const SegmenterModel& model, const std::filesystem::path& path);
SegmenterModel load_segmenter(const std::filesystem::path& path);

}  // namespace partseg
