#include "partseg/gan_backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "partseg/error.hpp"

namespace partseg {
namespace {

namespace F = torch::nn::functional;

constexpr double kLeakySlope = 0.2;

torch::Tensor pixel_norm(const torch::Tensor& x) {
  return x * torch::rsqrt(x.pow(2).mean(1, true) + 1e-8);
}

int layer_count(int64_t resolution) {
  int n = 0;
  for (int64_t r = 4; r <= resolution; r *= 2) ++n;
  return n;
}

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

torch::Tensor stack_images(const std::vector<Image>& images, const std::vector<int64_t>& idx) {
  std::vector<torch::Tensor> batch;
  batch.reserve(idx.size());
  for (auto i : idx) batch.push_back(images[i].pixels);
  return torch::stack(batch);
}

std::string kind_of(const TensorArchive& a) {
  return a.header.contains("kind") ? a.header["kind"].get<std::string>() : std::string();
}

}  // namespace

std::vector<LayerInfo> ActivationStack::layer_infos() const {
  std::vector<LayerInfo> out;
  for (const auto& e : entries) out.push_back(e.info);
  return out;
}

std::vector<LayerInfo> ActivationStack::selection_table() const {
  if (!generator_layers.empty()) return generator_layers;
  auto table = layer_infos();
  std::sort(table.begin(), table.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return table;
}

ToyGeneratorImpl::ToyGeneratorImpl(const ToyGanArch& arch) {
  require(arch.resolution >= 8 && is_power_of_two(arch.resolution), ErrorCode::invalid_argument,
          "generator resolution must be a power of two >= 8");
  require(arch.latent_dim >= 1, ErrorCode::invalid_argument, "latent_dim must be positive");
  const int n = layer_count(arch.resolution);
  for (int i = 0; i < n; ++i) {
    const int64_t res = int64_t{4} << i;
    table_.push_back({i, res, res, std::max(arch.min_channels, arch.base_channels >> i)});
  }
  input_ = register_module("layer0",
                           torch::nn::Linear(arch.latent_dim, table_[0].channels * 16));
  for (int i = 1; i < n; ++i) {
    ups_.push_back(register_module(
        "layer" + std::to_string(i),
        torch::nn::ConvTranspose2d(
            torch::nn::ConvTranspose2dOptions(table_[i - 1].channels, table_[i].channels, 4)
                .stride(2)
                .padding(1))));
  }
  output_ = register_module(
      "output",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(table_.back().channels, 3, 3).padding(1)));
}

torch::Tensor ToyGeneratorImpl::forward(const torch::Tensor& z, const std::vector<int>* taps,
                                        std::vector<torch::Tensor>* tapped) {
  auto want = [&](int id) {
    return taps && tapped && std::find(taps->begin(), taps->end(), id) != taps->end();
  };
  auto x = input_(z).view({z.size(0), table_[0].channels, 4, 4});
  x = F::leaky_relu(pixel_norm(x), F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
  if (want(0)) tapped->push_back(x);
  for (size_t i = 0; i < ups_.size(); ++i) {
    x = F::leaky_relu(pixel_norm(ups_[i](x)),
                      F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
    if (want(static_cast<int>(i + 1))) tapped->push_back(x);
  }
  return torch::tanh(output_(x));
}

ToyDiscriminatorImpl::ToyDiscriminatorImpl(const ToyGanArch& arch) {
  int64_t in = 3;
  int64_t ch = 32;
  int i = 0;
  for (int64_t res = arch.resolution / 2; res >= 4; res /= 2, ++i) {
    convs_.push_back(register_module(
        "layer" + std::to_string(i),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in, ch, 4).stride(2).padding(1))));
    in = ch;
    ch = std::min<int64_t>(ch * 2, 256);
  }
  head_ = register_module("head", torch::nn::Linear(in * 16, 1));
}

std::vector<torch::Tensor> ToyDiscriminatorImpl::features(const torch::Tensor& images) {
  std::vector<torch::Tensor> out;
  auto x = images;
  for (auto& conv : convs_) {
    x = F::leaky_relu(conv(x), F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
    out.push_back(x);
  }
  return out;
}

torch::Tensor ToyDiscriminatorImpl::forward(const torch::Tensor& images) {
  auto feats = features(images);
  return head_(feats.back().flatten(1)).squeeze(1);
}

GeneratorHandle::GeneratorHandle(ToyGanArch arch, ToyGenerator generator,
                                 ToyDiscriminator discriminator)
    : arch_(arch), generator_(std::move(generator)), discriminator_(std::move(discriminator)) {
  require(!generator_->layer_table().empty(), ErrorCode::invalid_argument, "empty layer table");
  generator_->eval();
  discriminator_->eval();
}

GeneratorHandle make_toy_gan(const ToyGanArch& arch, uint64_t seed) {
  torch::manual_seed(seed);
  ToyGenerator g(arch);
  ToyDiscriminator d(arch);
  return GeneratorHandle(arch, g, d);
}

std::pair<torch::Tensor, std::vector<torch::Tensor>> generate_batch(
    const GeneratorHandle& gen, const torch::Tensor& z, const std::vector<int>& tap_ids) {
  require(z.dim() == 2 && z.size(1) == gen.latent_dim(), ErrorCode::shape_mismatch,
          "latent dimension " + std::to_string(z.dim() == 2 ? z.size(1) : z.numel()) +
              " does not match generator latent_dim " + std::to_string(gen.latent_dim()));
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> tapped;
  auto images = gen.generator()->forward(z.to(torch::kFloat32), &tap_ids, &tapped);
  return {images, tapped};
}

GeneratedSample generate_with_taps(const GeneratorHandle& gen, const LatentCode& z,
                                   const LayerSelection& tap) {
  require(z.dimension() == gen.latent_dim(), ErrorCode::shape_mismatch,
          "latent dimension " + std::to_string(z.dimension()) +
              " does not match generator latent_dim " + std::to_string(gen.latent_dim()));
  const auto ids = resolve_selection(tap, gen.layer_table());
  require(!ids.empty(), ErrorCode::invalid_argument, "tap selection resolves to no layers");
  auto [images, tapped] = generate_batch(gen, z.values.view({1, -1}), ids);
  GeneratedSample out{Image{images[0]}, ActivationStack{{}, z, gen.layer_table()}};
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto& table = gen.layer_table();
    auto info = *std::find_if(table.begin(), table.end(), [&](const auto& l) { return l.id == ids[i]; });
    out.stack.entries.push_back({info, tapped[i][0]});
  }
  return out;
}

Image generate_image(const GeneratorHandle& gen, const LatentCode& z) {
  require(z.dimension() == gen.latent_dim(), ErrorCode::shape_mismatch,
          "latent dimension does not match generator");
  auto [images, tapped] = generate_batch(gen, z.values.view({1, -1}), {});
  return Image{images[0]};
}

LatentCode sample_latent(int64_t latent_dim, uint64_t rng_seed) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(rng_seed);
  return LatentCode{torch::randn({latent_dim}, g, torch::kFloat32), LatentSpace::input};
}

LatentCode sample_latent(const GeneratorHandle& gen, uint64_t rng_seed) {
  return sample_latent(gen.latent_dim(), rng_seed);
}

LatentCode mean_latent(const GeneratorHandle& gen, int count, uint64_t rng_seed) {
  require(count >= 1, ErrorCode::invalid_argument, "mean_latent needs count >= 1");
  auto g = at::make_generator<at::CPUGeneratorImpl>(rng_seed);
  auto zs = torch::randn({count, gen.latent_dim()}, g, torch::kFloat32);
  return LatentCode{zs.mean(0), LatentSpace::input};
}

ToyGanTrainResult train_toy_gan(const std::vector<Image>& images, const ToyGanTrainConfig& cfg,
                                uint64_t rng_seed, const ProgressFn& progress) {
  require(images.size() >= 256, ErrorCode::invalid_argument,
          "toy GAN training needs at least 256 images, got " + std::to_string(images.size()));
  const auto h = images.front().height(), w = images.front().width();
  for (const auto& img : images) {
    require(img.pixels.dim() == 3 && img.pixels.size(0) == 3 && img.height() == h &&
                img.width() == w,
            ErrorCode::shape_mismatch, "toy GAN training images have inconsistent sizes");
  }
  require(h == w && is_power_of_two(h), ErrorCode::invalid_argument,
          "image resolution must be a square power of two");
  require(h == 32 || h == 64, ErrorCode::invalid_argument, "image resolution must be 32 or 64");
  require(cfg.steps >= 0 && cfg.batch_size >= 1, ErrorCode::invalid_argument, "bad GAN config");

  ToyGanArch arch = cfg.arch;
  arch.resolution = h;
  auto handle = make_toy_gan(arch, rng_seed);
  auto G = handle.generator();
  auto D = handle.discriminator();
  G->train();
  D->train();

  torch::optim::Adam opt_g(G->parameters(),
                           torch::optim::AdamOptions(cfg.lr).betas({cfg.beta1, cfg.beta2}));
  torch::optim::Adam opt_d(D->parameters(),
                           torch::optim::AdamOptions(cfg.lr).betas({cfg.beta1, cfg.beta2}));
  std::mt19937_64 rng(mix_seed(rng_seed, 1));
  std::uniform_int_distribution<int64_t> pick(0, static_cast<int64_t>(images.size()) - 1);
  auto zgen = at::make_generator<at::CPUGeneratorImpl>(rng_seed ^ 0x5eedull);

  GanTrainTrace trace;
  double d_acc = 0.0, g_acc = 0.0;
  int acc_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int64_t> idx(cfg.batch_size);
    for (auto& i : idx) i = pick(rng);
    auto real = stack_images(images, idx);

    // Discriminator update.
    auto z = torch::randn({cfg.batch_size, arch.latent_dim}, zgen);
    torch::Tensor fake;
    {
      torch::NoGradGuard ng;
      fake = G->forward(z);
    }
    opt_d.zero_grad();
    auto real_in = real.clone().requires_grad_(cfg.r1_gamma > 0);
    auto real_logits = D->forward(real_in);
    auto d_loss = F::softplus(D->forward(fake)).mean() + F::softplus(-real_logits).mean();
    auto total_d = d_loss;
    if (cfg.r1_gamma > 0) {
      auto grad = torch::autograd::grad({real_logits.sum()}, {real_in}, {}, true, true)[0];
      total_d = total_d + 0.5 * cfg.r1_gamma * grad.pow(2).sum({1, 2, 3}).mean();
    }
    total_d.backward();
    opt_d.step();

    // Generator update.
    opt_g.zero_grad();
    auto z2 = torch::randn({cfg.batch_size, arch.latent_dim}, zgen);
    auto g_loss = F::softplus(-D->forward(G->forward(z2))).mean();
    g_loss.backward();
    opt_g.step();

    d_acc += d_loss.item<double>();
    g_acc += g_loss.item<double>();
    ++acc_n;
    if ((step + 1) % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps) {
      trace.step.push_back(step + 1);
      trace.d_loss.push_back(d_acc / acc_n);
      trace.g_loss.push_back(g_acc / acc_n);
      if (progress) progress(step + 1, cfg.steps, g_acc / acc_n);
      d_acc = g_acc = 0.0;
      acc_n = 0;
    }
  }
  G->eval();
  D->eval();
  return {GeneratorHandle(arch, G, D), trace};
}

double discriminator_probe_accuracy(const GeneratorHandle& gen, const std::vector<Image>& real,
                                    int n_fake, uint64_t rng_seed) {
  require(!real.empty() && n_fake > 0, ErrorCode::invalid_argument, "probe needs samples");
  torch::NoGradGuard ng;
  auto D = gen.discriminator();
  std::vector<int64_t> idx(real.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto real_logits = D->forward(stack_images(real, idx));
  auto zgen = at::make_generator<at::CPUGeneratorImpl>(rng_seed);
  auto z = torch::randn({n_fake, gen.latent_dim()}, zgen);
  auto fake_logits = D->forward(gen.generator()->forward(z));
  const double real_acc = (real_logits > 0).to(torch::kFloat64).mean().item<double>();
  const double fake_acc = (fake_logits <= 0).to(torch::kFloat64).mean().item<double>();
  return 0.5 * (real_acc + fake_acc);
}

TensorArchive checkpoint_archive(const GeneratorHandle& gen) {
  TensorArchive a;
  const auto& arch = gen.arch();
  a.header["kind"] = "generator";
  a.header["format_version"] = kArchiveFormatVersion;
  a.header["latent_dim"] = arch.latent_dim;
  a.header["resolution"] = arch.resolution;
  a.header["base_channels"] = arch.base_channels;
  a.header["min_channels"] = arch.min_channels;
  a.header["layers"] = gen.layer_table();
  for (const auto& p : gen.generator()->named_parameters()) a.put(p.key(), p.value());
  for (const auto& p : gen.discriminator()->named_parameters()) a.put("disc." + p.key(), p.value());
  return a;
}

GeneratorHandle generator_from_archive(const TensorArchive& a) {
  require(kind_of(a) == "generator", ErrorCode::invalid_argument,
          "archive is not a generator checkpoint");
  ToyGanArch arch;
  std::vector<LayerInfo> manifest;
  try {
    arch.latent_dim = a.header.at("latent_dim").get<int64_t>();
    arch.resolution = a.header.at("resolution").get<int64_t>();
    arch.base_channels = a.header.at("base_channels").get<int64_t>();
    arch.min_channels = a.header.at("min_channels").get<int64_t>();
    manifest = a.header.at("layers").get<std::vector<LayerInfo>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::corrupt, std::string("generator checkpoint header: ") + e.what());
  }
  require(!manifest.empty(), ErrorCode::corrupt, "generator checkpoint: empty layer manifest");

  // Weights must agree with the manifest before the architecture is trusted.
  for (const auto& layer : manifest) {
    const std::string name = "layer" + std::to_string(layer.id) + ".weight";
    require(a.has(name), ErrorCode::corrupt, "generator checkpoint: missing " + name);
    const auto& w = a.get(name);
    const int64_t channels = layer.id == 0 ? (w.dim() == 2 ? w.size(0) / (layer.height * layer.width) : -1)
                                           : (w.dim() == 4 ? w.size(1) : -1);
    require(channels == layer.channels, ErrorCode::shape_mismatch,
            "generator checkpoint: layer" + std::to_string(layer.id) + " has " +
                std::to_string(channels) + " channels, manifest declares " +
                std::to_string(layer.channels));
  }

  torch::manual_seed(0);
  ToyGenerator g(arch);
  ToyDiscriminator d(arch);
  require(g->layer_table() == manifest, ErrorCode::shape_mismatch,
          "generator checkpoint: manifest does not match architecture parameters");
  torch::NoGradGuard ng;
  auto load_into = [&](torch::nn::Module& m, const std::string& prefix) {
    for (auto& p : m.named_parameters()) {
      const auto name = prefix + p.key();
      const auto& src = a.get(name);
      require(src.sizes() == p.value().sizes(), ErrorCode::shape_mismatch,
              "generator checkpoint: shape mismatch for " + name);
      p.value().copy_(src);
    }
  };
  load_into(*g, "");
  load_into(*d, "disc.");
  return GeneratorHandle(arch, g, d);
}

void save_checkpoint(const GeneratorHandle& gen, const std::filesystem::path& path) {
  checkpoint_archive(gen).save(path);
}

GeneratorHandle load_checkpoint(const std::filesystem::path& path) {
  return generator_from_archive(TensorArchive::load(path));
}

TensorArchive latent_archive(const LatentCode& z) {
  TensorArchive a;
  a.header["kind"] = "latent";
  a.header["space"] = static_cast<int>(z.space);
  a.put("latent", z.values.to(torch::kFloat32));
  return a;
}

LatentCode latent_from_archive(const TensorArchive& a) {
  require(kind_of(a) == "latent", ErrorCode::invalid_argument, "archive is not a latent file");
  return LatentCode{a.get("latent").clone(), static_cast<LatentSpace>(a.header.value("space", 0))};
}

void configure_deterministic_runtime() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, false);
}

}  // namespace partseg
