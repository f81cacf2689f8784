#pragma once

// Auto-shot stage: a generator plus a trained few-shot segmenter produce a
// pseudo-labelled dataset whose targets are raw logits; a UNet trained on it
// (with geometric augmentation) segments raw images without inversion.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "partseg/datasets.hpp"
#include "partseg/gan_backbone.hpp"
#include "partseg/representation.hpp"
#include "partseg/segmenters.hpp"

namespace partseg {

struct DistilledSample {
  int64_t id = 0;
  Image image;       // quantised to 8 bits, identical to its PNG on disk
  LogitMap target;   // raw teacher logits at image resolution
  uint64_t seed = 0;
  LatentCode latent;
  std::string checksum;
};

struct AugmentationConfig {
  double hflip_prob = 0.5;
  Range scale{0.5, 2.0};
  Range rotation_deg{-10.0, 10.0};
  Range translate_frac{0.0, 0.5};  // magnitude per axis, sign drawn separately
  float fill_value = -1.0f;        // image fill for exposed regions (black)
  double background_logit = 10.0;  // target fill: this on class 0, 0 elsewhere
};

void validate(const AugmentationConfig& cfg);

struct GeometricTransform {
  double scale = 1.0;
  double rotation_deg = 0.0;
  double translate_x = 0.0;  // signed fraction of the width
  double translate_y = 0.0;  // signed fraction of the height
  bool hflip = false;
};

GeometricTransform sample_transform(const AugmentationConfig& cfg, std::mt19937_64& rng);

// Applies scale -> rotate -> translate -> flip about the image centre to the
// image and (per channel) to the logit target, both bilinear. Pixels mapped
// from outside the source take the fill values.
DistilledSample apply_transform(const DistilledSample& sample, const GeometricTransform& t,
                                const AugmentationConfig& cfg);
DistilledSample augment(const DistilledSample& sample, const AugmentationConfig& cfg,
                        std::mt19937_64& rng);

struct UNetSpec {
  int64_t n_classes = 2;
  int64_t in_channels = 3;
  // Encoder widths are (1, 2, 4, 8, 8) x base, decoder (8, 4, 2, 1) x base.
  int64_t base_channels = 64;
};

class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const UNetSpec& spec);

  // (N, in, H, W) with H, W >= 16 -> (N, n_classes, H, W). Inputs are zero
  // padded to a multiple of 16 and the output is cropped back.
  torch::Tensor forward(const torch::Tensor& x);
  // Spatial size of the deepest encoder block for an input of `input`.
  static Resolution bottleneck_resolution(Resolution input);

  const UNetSpec& spec() const { return spec_; }
  std::vector<int64_t> encoder_channels() const;
  std::vector<int64_t> decoder_channels() const;

 private:
  torch::nn::Sequential double_conv(int64_t in, int64_t out, const std::string& name);

  UNetSpec spec_;
  std::vector<torch::nn::Sequential> down_;
  std::vector<torch::nn::Sequential> up_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(UNet);

UNet build_unet(const UNetSpec& spec, uint64_t seed = 0);
LogitMap unet_predict(const UNet& model, const Image& image);
torch::Tensor unet_predict_batch(const UNet& model, const torch::Tensor& images);

void save_unet(const UNet& model, const std::filesystem::path& path);
UNet load_unet(const std::filesystem::path& path);

struct DistillOptions {
  ExtractOptions extract;  // representation layout the teacher was trained on
  bool skip_upsample = false;  // debug: keep targets at representation resolution
};

// n samples from seeds mix_seed(rng_seed, i). When `root` is non-empty the
// dataset is also written there (images/, targets/, manifest.jsonl); each
// manifest line is appended only after its files are fully written.
std::vector<DistilledSample> generate_distilled_dataset(const GeneratorHandle& gen,
                                                        const SegmenterModel& teacher,
                                                        const LayerSelection& sel, int64_t n,
                                                        uint64_t rng_seed,
                                                        const std::filesystem::path& root = {},
                                                        const DistillOptions& opts = {});

// Loads a written dataset; throws naming the first record that fails its checksum.
std::vector<DistilledSample> load_distilled_dataset(const std::filesystem::path& root);

enum class TargetMode { logits, one_hot };

std::string to_string(TargetMode m);
TargetMode parse_target_mode(const std::string& text);

struct AutoShotTrainConfig {
  int epochs = 300;
  double base_lr = 1e-3;
  double plateau_decay_factor = 0.1;
  int plateau_patience = 20;
  double validation_fraction = 0.1;
  TargetMode target_mode = TargetMode::logits;
  int batch_size = 8;
  bool augment = true;
  uint64_t rng_seed = 0;
};

// Multiplies the rate by `factor` once `patience` consecutive epochs fail to
// lower the best validation loss, then starts counting again.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience);

  // Returns true when this observation triggered a decay.
  bool observe(double validation_loss);
  double lr() const { return lr_; }
  int decay_events() const { return decays_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  double best_;
  int bad_epochs_ = 0;
  int decays_ = 0;
};

// Soft-target cross-entropy against softmax(target) (logits mode), or
// standard cross-entropy against argmax(target) (one-hot mode). In one-hot
// mode pixels whose target scores are all equal carry no label and are skipped.
torch::Tensor distillation_loss(const torch::Tensor& logits, const torch::Tensor& target,
                                TargetMode mode);

struct AutoShotTrace {
  std::vector<double> train_loss;
  std::vector<double> validation_loss;
  std::vector<double> lr;
  std::vector<int> decay_epochs;
  std::vector<int64_t> train_ids;
  std::vector<int64_t> validation_ids;
};

// Deterministic (train, validation) index split for n samples.
std::pair<std::vector<size_t>, std::vector<size_t>> split_validation(size_t n, double fraction,
                                                                     uint64_t seed);

using EpochLossFn = std::function<void(int epoch, int epochs, double train_loss, double val_loss)>;

AutoShotTrace train_autoshot(UNet& model, const std::vector<DistilledSample>& dataset,
                             const AugmentationConfig& aug, const AutoShotTrainConfig& cfg,
                             const EpochLossFn& on_epoch = {});

struct LabeledImage {
  Image image;
  PartAnnotation labels;
};

// Same trainer in one-hot mode over ground-truth masks (ignore pixels skipped).
AutoShotTrace train_supervised_baseline(UNet& model, const std::vector<LabeledImage>& pairs,
                                        const AugmentationConfig& aug, AutoShotTrainConfig cfg,
                                        const EpochLossFn& on_epoch = {});

Image quantize_8bit(const Image& image);

namespace debug {
// Number of times argmax has been applied to distillation targets in this
// process; stays 0 while only logits-mode training runs.
int64_t target_argmax_count();
}  // namespace debug

}  // namespace partseg
