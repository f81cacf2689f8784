#pragma once

// Latent-code optimisation: find z whose generated image reproduces a given
// image, so the image's pixel representation can be read off the generator.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "partseg/gan_backbone.hpp"
#include "partseg/representation.hpp"

namespace partseg {

enum class InversionInit { mean_latent, random, provided };

struct InversionConfig {
  int steps = 1000;
  double step_size = 0.01;  // Adam learning rate on the latent
  double pixel_weight = 1.0;
  // Distance between discriminator feature maps of output and target.
  double perceptual_weight = 0.1;
  InversionInit init = InversionInit::mean_latent;
  std::optional<LatentCode> provided;
  int mean_latent_samples = 1000;
  // Stop once a step improves the loss by less than this (0 = never).
  double early_stop_delta = 0.0;
};

struct InversionResult {
  LatentCode code;               // best-loss code seen, not necessarily the last
  std::vector<double> loss_trace;  // loss of each evaluated code, in order
  double best_loss = 0.0;
  Image reconstruction;
};

void validate(const InversionConfig& cfg);

// Loss of one code against a target image, using the same terms as invert.
double inversion_loss(const GeneratorHandle& gen, const LatentCode& z, const Image& target,
                      const InversionConfig& cfg);

// Each step evaluates the current code, records its loss, then takes one
// Adam step; `steps` codes are evaluated in total, so steps = 1 never moves
// away from the initial code.
InversionResult invert(const GeneratorHandle& gen, const Image& image, const InversionConfig& cfg,
                       uint64_t rng_seed);

PixelRepresentation represent_image(const GeneratorHandle& gen, const Image& image,
                                    const LayerSelection& sel, const InversionConfig& cfg,
                                    uint64_t rng_seed, const ExtractOptions& opts = {});

// Best-so-far envelope of a loss trace.
std::vector<double> best_so_far(const std::vector<double>& trace);

// Latent archive plus a `step,loss` CSV.
void save_inversion(const InversionResult& result, const std::filesystem::path& latent_path,
                    const std::filesystem::path& trace_csv);

}  // namespace partseg
