#pragma once

// Generators whose per-layer activations can be tapped during synthesis:
// a small DCGAN-style pair trained at desk scale, and checkpoint IO for
// generators trained elsewhere in the same layout.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "partseg/image_io.hpp"
#include "partseg/layer_selection.hpp"
#include "partseg/tensor_archive.hpp"
#include "partseg/types.hpp"

namespace partseg {

enum class LatentSpace { input, style, per_layer_style };

struct LatentCode {
  torch::Tensor values;  // float32 (d,)
  LatentSpace space = LatentSpace::input;

  int64_t dimension() const { return values.numel(); }
};

struct ActivationEntry {
  LayerInfo info;
  torch::Tensor value;  // float32 (c, h, w), post-nonlinearity
};

struct ActivationStack {
  std::vector<ActivationEntry> entries;  // depth order
  LatentCode source_latent;
  // Full layer table of the source generator. Relative selections (groups,
  // all_but_last) resolve against it; empty means `entries` is the table.
  std::vector<LayerInfo> generator_layers;

  std::vector<LayerInfo> layer_infos() const;
  std::vector<LayerInfo> selection_table() const;
};

struct ToyGanArch {
  int64_t latent_dim = 128;
  int64_t resolution = 32;  // power of two, >= 8
  int64_t base_channels = 256;
  int64_t min_channels = 16;
};

// Layer 0 is a dense projection to 4x4; each later layer doubles the side
// with a stride-2 transposed conv. Every layer: pixel norm then leaky ReLU.
// The RGB head (`output`) is a 3x3 conv with tanh.
class ToyGeneratorImpl : public torch::nn::Module {
 public:
  explicit ToyGeneratorImpl(const ToyGanArch& arch);

  // z: (N, d) -> images (N, 3, R, R). When `taps` is given, the activations
  // of those layer ids (ascending) are appended to `tapped`.
  torch::Tensor forward(const torch::Tensor& z, const std::vector<int>* taps = nullptr,
                        std::vector<torch::Tensor>* tapped = nullptr);

  const std::vector<LayerInfo>& layer_table() const { return table_; }

 private:
  std::vector<LayerInfo> table_;
  torch::nn::Linear input_{nullptr};
  std::vector<torch::nn::ConvTranspose2d> ups_;
  torch::nn::Conv2d output_{nullptr};
};
TORCH_MODULE(ToyGenerator);

class ToyDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit ToyDiscriminatorImpl(const ToyGanArch& arch);

  torch::Tensor forward(const torch::Tensor& images);  // (N,) logits
  // Post-activation maps of every conv layer, shallow to deep.
  std::vector<torch::Tensor> features(const torch::Tensor& images);

 private:
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ToyDiscriminator);

// Shared, read-only after construction. Copies share the same weights.
class GeneratorHandle {
 public:
  GeneratorHandle(ToyGanArch arch, ToyGenerator generator, ToyDiscriminator discriminator);

  int64_t latent_dim() const { return arch_.latent_dim; }
  const std::vector<LayerInfo>& layer_table() const { return generator_->layer_table(); }
  Resolution output_resolution() const { return {arch_.resolution, arch_.resolution}; }
  const ToyGanArch& arch() const { return arch_; }

  ToyGenerator generator() const { return generator_; }
  ToyDiscriminator discriminator() const { return discriminator_; }

 private:
  ToyGanArch arch_;
  ToyGenerator generator_;
  ToyDiscriminator discriminator_;
};

// Fresh, randomly initialised pair (seeded).
GeneratorHandle make_toy_gan(const ToyGanArch& arch, uint64_t seed);

struct GeneratedSample {
  Image image;
  ActivationStack stack;
};

// Pure function of (gen, z, tap). Throws on latent dimension mismatch or a
// selection that resolves to no layers.
GeneratedSample generate_with_taps(const GeneratorHandle& gen, const LatentCode& z,
                                   const LayerSelection& tap);

// Batched variant: z (N, d) -> images and per-tapped-layer (N, c, h, w).
std::pair<torch::Tensor, std::vector<torch::Tensor>> generate_batch(const GeneratorHandle& gen,
                                                                    const torch::Tensor& z,
                                                                    const std::vector<int>& tap_ids);

Image generate_image(const GeneratorHandle& gen, const LatentCode& z);

// Standard normal components, deterministic in (latent_dim, seed).
LatentCode sample_latent(const GeneratorHandle& gen, uint64_t rng_seed);
LatentCode sample_latent(int64_t latent_dim, uint64_t rng_seed);
// Average of `count` sampled latents.
LatentCode mean_latent(const GeneratorHandle& gen, int count, uint64_t rng_seed);

struct ToyGanTrainConfig {
  ToyGanArch arch;
  int steps = 2000;
  int batch_size = 32;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.99;
  double r1_gamma = 1.0;  // R1 penalty on real images, 0 disables
  int log_every = 50;
};

struct GanTrainTrace {
  std::vector<int> step;
  std::vector<double> d_loss;
  std::vector<double> g_loss;
};

struct ToyGanTrainResult {
  GeneratorHandle generator;
  GanTrainTrace trace;
};

using ProgressFn = std::function<void(int step, int total, double value)>;

// Non-saturating adversarial training. Images must share one power-of-two
// resolution in {32, 64} (overrides cfg.arch.resolution); at least 256.
ToyGanTrainResult train_toy_gan(const std::vector<Image>& images, const ToyGanTrainConfig& cfg,
                                uint64_t rng_seed, const ProgressFn& progress = {});

// Accuracy of the trained discriminator at telling `real` from fresh samples,
// threshold at logit 0, averaged over the two halves.
double discriminator_probe_accuracy(const GeneratorHandle& gen, const std::vector<Image>& real,
                                    int n_fake, uint64_t rng_seed);

TensorArchive checkpoint_archive(const GeneratorHandle& gen);
GeneratorHandle generator_from_archive(const TensorArchive& archive);
void save_checkpoint(const GeneratorHandle& gen, const std::filesystem::path& path);
GeneratorHandle load_checkpoint(const std::filesystem::path& path);

TensorArchive latent_archive(const LatentCode& z);
LatentCode latent_from_archive(const TensorArchive& archive);

// Single thread plus deterministic kernels; required for bit-identical reruns.
void configure_deterministic_runtime();

}  // namespace partseg
