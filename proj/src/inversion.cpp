#include "partseg/inversion.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "partseg/error.hpp"

namespace partseg {
namespace {

torch::Tensor loss_terms(const GeneratorHandle& gen, const torch::Tensor& z,
                         const torch::Tensor& target, const std::vector<torch::Tensor>& target_feats,
                         const InversionConfig& cfg) {
  auto G = gen.generator();
  auto D = gen.discriminator();
  auto out = G->forward(z.view({1, -1}));
  auto loss = torch::zeros({}, torch::kFloat32);
  if (cfg.pixel_weight > 0) loss = loss + cfg.pixel_weight * (out - target).pow(2).mean();
  if (cfg.perceptual_weight > 0) {
    auto feats = D->features(out);
    auto f = torch::zeros({}, torch::kFloat32);
    for (size_t i = 0; i < feats.size(); ++i) f = f + (feats[i] - target_feats[i]).pow(2).mean();
    loss = loss + cfg.perceptual_weight * f / static_cast<double>(feats.size());
  }
  return loss;
}

std::vector<torch::Tensor> target_features(const GeneratorHandle& gen, const torch::Tensor& target,
                                           const InversionConfig& cfg) {
  if (cfg.perceptual_weight <= 0) return {};
  torch::NoGradGuard ng;
  return gen.discriminator()->features(target);
}

torch::Tensor checked_target(const GeneratorHandle& gen, const Image& image) {
  const auto res = gen.output_resolution();
  require(image.pixels.dim() == 3 && image.pixels.size(0) == 3 && image.height() == res.height &&
              image.width() == res.width,
          ErrorCode::shape_mismatch,
          "image is " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
              ", generator outputs " + std::to_string(res.height) + "x" + std::to_string(res.width));
  return image.pixels.to(torch::kFloat32).unsqueeze(0);
}

}  // namespace

void validate(const InversionConfig& cfg) {
  require(cfg.steps >= 1, ErrorCode::invalid_argument, "inversion steps must be >= 1");
  require(cfg.step_size > 0, ErrorCode::invalid_argument, "inversion step_size must be positive");
  require(cfg.pixel_weight >= 0 && cfg.perceptual_weight >= 0 &&
              (cfg.pixel_weight > 0 || cfg.perceptual_weight > 0),
          ErrorCode::invalid_argument, "inversion needs at least one positive loss weight");
  require(cfg.early_stop_delta >= 0, ErrorCode::invalid_argument,
          "early_stop_delta must be non-negative");
  require(cfg.init != InversionInit::provided || cfg.provided.has_value(),
          ErrorCode::invalid_argument, "init=provided needs a latent code");
}

double inversion_loss(const GeneratorHandle& gen, const LatentCode& z, const Image& target,
                      const InversionConfig& cfg) {
  auto t = checked_target(gen, target);
  torch::NoGradGuard ng;
  return loss_terms(gen, z.values, t, target_features(gen, t, cfg), cfg).item<double>();
}

InversionResult invert(const GeneratorHandle& gen, const Image& image, const InversionConfig& cfg,
                       uint64_t rng_seed) {
  validate(cfg);
  auto target = checked_target(gen, image);
  const auto feats = target_features(gen, target, cfg);

  LatentCode start;
  switch (cfg.init) {
    case InversionInit::mean_latent:
      start = mean_latent(gen, cfg.mean_latent_samples, rng_seed);
      break;
    case InversionInit::random:
      start = sample_latent(gen, rng_seed);
      break;
    case InversionInit::provided:
      start = *cfg.provided;
      break;
  }
  require(start.dimension() == gen.latent_dim(), ErrorCode::shape_mismatch,
          "initial latent dimension does not match generator");

  auto z = start.values.detach().clone().to(torch::kFloat32).requires_grad_(true);
  torch::optim::Adam opt({z}, torch::optim::AdamOptions(cfg.step_size));

  InversionResult result;
  result.best_loss = std::numeric_limits<double>::infinity();
  torch::Tensor best = z.detach().clone();
  for (int step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    auto loss = loss_terms(gen, z, target, feats, cfg);
    const double value = loss.item<double>();
    if (!std::isfinite(value))
      fail(ErrorCode::numerical, "inversion loss became non-finite at step " + std::to_string(step) +
                                     " (latent norm " + std::to_string(z.norm().item<double>()) + ")");
    const double previous = result.loss_trace.empty() ? value : result.loss_trace.back();
    result.loss_trace.push_back(value);
    if (value < result.best_loss) {
      result.best_loss = value;
      best = z.detach().clone();
    }
    if (step + 1 == cfg.steps) break;
    if (step > 0 && cfg.early_stop_delta > 0 && previous - value < cfg.early_stop_delta) break;
    if (step == 0 && std::isinf(cfg.early_stop_delta)) break;
    // Gradient w.r.t. the latent only; generator weights stay untouched.
    z.mutable_grad() = torch::autograd::grad({loss}, {z})[0].clone();
    opt.step();
  }
  result.code = LatentCode{best, start.space};
  result.reconstruction = generate_image(gen, result.code);
  return result;
}

PixelRepresentation represent_image(const GeneratorHandle& gen, const Image& image,
                                    const LayerSelection& sel, const InversionConfig& cfg,
                                    uint64_t rng_seed, const ExtractOptions& opts) {
  auto inv = invert(gen, image, cfg, rng_seed);
  auto sample = generate_with_taps(gen, inv.code, sel);
  return extract_representation(sample.stack, sel, opts);
}

std::vector<double> best_so_far(const std::vector<double>& trace) {
  std::vector<double> out;
  double best = std::numeric_limits<double>::infinity();
  for (double v : trace) out.push_back(best = std::min(best, v));
  return out;
}

void save_inversion(const InversionResult& result, const std::filesystem::path& latent_path,
                    const std::filesystem::path& trace_csv) {
  auto a = latent_archive(result.code);
  a.header["best_loss"] = result.best_loss;
  a.save(latent_path);
  std::string csv = "step,loss\n";
  for (size_t i = 0; i < result.loss_trace.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, result.loss_trace[i]);
    csv += buf;
  }
  write_file_atomic(trace_csv, csv);
}

}  // namespace partseg
