#include "partseg/distillation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "partseg/error.hpp"
#include "partseg/tensor_archive.hpp"

namespace partseg {
namespace {

namespace F = torch::nn::functional;

double draw(std::mt19937_64& rng, Range r) {
  if (r.hi <= r.lo) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

// Bilinear inverse-mapped warp of a (C, H, W) tensor. `fill` has one value
// per channel and stands in for every pixel outside the source.
torch::Tensor warp(const torch::Tensor& src, const GeometricTransform& t,
                   const std::vector<float>& fill) {
  auto in = src.to(torch::kFloat32).contiguous();
  const int64_t c = in.size(0), h = in.size(1), w = in.size(2);
  auto out = torch::empty_like(in);
  auto s = in.accessor<float, 3>();
  auto o = out.accessor<float, 3>();
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double theta = t.rotation_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const double tx = t.translate_x * w, ty = t.translate_y * h;

  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      // Undo flip, translation, rotation, scale in turn.
      double dx = x - cx, dy = y - cy;
      if (t.hflip) dx = -dx;
      dx -= tx;
      dy -= ty;
      const double rx = cos_t * dx + sin_t * dy;
      const double ry = -sin_t * dx + cos_t * dy;
      const double sx = cx + rx / t.scale, sy = cy + ry / t.scale;

      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double ax = sx - fx0, ay = sy - fy0;
      const int64_t x0 = static_cast<int64_t>(fx0), y0 = static_cast<int64_t>(fy0);
      const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
      const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int64_t k = 0; k < c; ++k) {
        double v = 0.0;
        for (int q = 0; q < 4; ++q) {
          const bool inside = xs[q] >= 0 && xs[q] < w && ys[q] >= 0 && ys[q] < h;
          const double px = inside ? s[k][ys[q]][xs[q]] : fill[k];
          v += wts[q] * px;
        }
        o[k][y][x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

std::atomic<int64_t> g_target_argmax_count{0};

std::string hex32(uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", v);
  return buf;
}

std::string padded_id(int64_t id) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(id));
  return buf;
}

}  // namespace

namespace debug {
// Times argmax was taken over distillation targets (one-hot mode only).
int64_t target_argmax_count() { return g_target_argmax_count.load(); }
}  // namespace debug

void validate(const AugmentationConfig& cfg) {
  require(cfg.hflip_prob >= 0 && cfg.hflip_prob <= 1, ErrorCode::invalid_argument,
          "hflip_prob must be in [0, 1]");
  require(cfg.scale.lo > 0 && cfg.scale.hi >= cfg.scale.lo, ErrorCode::invalid_argument,
          "scale range must be positive and ordered");
  require(cfg.rotation_deg.hi >= cfg.rotation_deg.lo, ErrorCode::invalid_argument,
          "rotation range must be ordered");
  require(cfg.translate_frac.lo >= 0 && cfg.translate_frac.hi >= cfg.translate_frac.lo,
          ErrorCode::invalid_argument, "translation range must be non-negative and ordered");
}

GeometricTransform sample_transform(const AugmentationConfig& cfg, std::mt19937_64& rng) {
  GeometricTransform t;
  t.scale = draw(rng, cfg.scale);
  t.rotation_deg = draw(rng, cfg.rotation_deg);
  std::bernoulli_distribution coin(0.5);
  t.translate_x = draw(rng, cfg.translate_frac) * (coin(rng) ? 1.0 : -1.0);
  t.translate_y = draw(rng, cfg.translate_frac) * (coin(rng) ? 1.0 : -1.0);
  t.hflip = std::bernoulli_distribution(cfg.hflip_prob)(rng);
  return t;
}

DistilledSample apply_transform(const DistilledSample& sample, const GeometricTransform& t,
                                const AugmentationConfig& cfg) {
  DistilledSample out = sample;
  out.image.pixels = warp(sample.image.pixels, t, std::vector<float>(3, cfg.fill_value));
  std::vector<float> target_fill(sample.target.n_classes(), 0.0f);
  target_fill[0] = static_cast<float>(cfg.background_logit);
  out.target.scores = warp(sample.target.scores, t, target_fill);
  return out;
}

DistilledSample augment(const DistilledSample& sample, const AugmentationConfig& cfg,
                        std::mt19937_64& rng) {
  return apply_transform(sample, sample_transform(cfg, rng), cfg);
}

UNetImpl::UNetImpl(const UNetSpec& spec) : spec_(spec) {
  require(spec.n_classes >= 2, ErrorCode::invalid_argument, "UNet needs n_classes >= 2");
  require(spec.in_channels >= 1 && spec.base_channels >= 1, ErrorCode::invalid_argument,
          "UNet channel counts must be positive");
  const auto enc = encoder_channels();
  const auto dec = decoder_channels();
  int64_t in = spec.in_channels;
  for (size_t i = 0; i < enc.size(); ++i) {
    down_.push_back(double_conv(in, enc[i], "enc" + std::to_string(i)));
    in = enc[i];
  }
  for (size_t j = 0; j < dec.size(); ++j) {
    const int64_t skip = enc[enc.size() - 2 - j];
    up_.push_back(double_conv(in + skip, dec[j], "dec" + std::to_string(j)));
    in = dec[j];
  }
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, spec.n_classes, 1)));
}

std::vector<int64_t> UNetImpl::encoder_channels() const {
  const int64_t b = spec_.base_channels;
  return {b, 2 * b, 4 * b, 8 * b, 8 * b};
}

std::vector<int64_t> UNetImpl::decoder_channels() const {
  const int64_t b = spec_.base_channels;
  return {8 * b, 4 * b, 2 * b, b};
}

torch::nn::Sequential UNetImpl::double_conv(int64_t in, int64_t out, const std::string& name) {
  torch::nn::Sequential block(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1).bias(false)),
      torch::nn::BatchNorm2d(out), torch::nn::ReLU(),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1).bias(false)),
      torch::nn::BatchNorm2d(out), torch::nn::ReLU());
  return register_module(name, block);
}

Resolution UNetImpl::bottleneck_resolution(Resolution input) {
  auto up16 = [](int64_t v) { return (v + 15) / 16 * 16; };
  return {up16(input.height) / 16, up16(input.width) / 16};
}

torch::Tensor UNetImpl::forward(const torch::Tensor& input) {
  require(input.dim() == 4 && input.size(1) == spec_.in_channels, ErrorCode::shape_mismatch,
          "UNet expects (N, " + std::to_string(spec_.in_channels) + ", H, W) input");
  const int64_t h = input.size(2), w = input.size(3);
  require(h >= 16 && w >= 16, ErrorCode::invalid_argument,
          "UNet input must be at least 16x16, got " + std::to_string(h) + "x" + std::to_string(w));
  const int64_t ph = (16 - h % 16) % 16, pw = (16 - w % 16) % 16;
  auto x = (ph || pw) ? F::pad(input, F::PadFuncOptions({0, pw, 0, ph})) : input;

  std::vector<torch::Tensor> skips;
  for (size_t i = 0; i < down_.size(); ++i) {
    if (i > 0) x = F::max_pool2d(x, F::MaxPool2dFuncOptions(2).stride(2));
    x = down_[i]->forward(x);
    skips.push_back(x);
  }
  for (size_t j = 0; j < up_.size(); ++j) {
    const auto& skip = skips[skips.size() - 2 - j];
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                              .mode(torch::kBilinear)
                              .align_corners(false));
    x = up_[j]->forward(torch::cat({x, skip}, 1));
  }
  x = head_(x);
  if (ph || pw) {
    using torch::indexing::Slice;
    x = x.index({Slice(), Slice(), Slice(0, h), Slice(0, w)});
  }
  return x;
}

UNet build_unet(const UNetSpec& spec, uint64_t seed) {
  torch::manual_seed(seed);
  UNet net(spec);
  net->eval();
  return net;
}

torch::Tensor unet_predict_batch(const UNet& model, const torch::Tensor& images) {
  torch::NoGradGuard ng;
  auto net = model;
  net->eval();
  return net->forward(images);
}

LogitMap unet_predict(const UNet& model, const Image& image) {
  return LogitMap{unet_predict_batch(model, image.pixels.unsqueeze(0))[0]};
}

void save_unet(const UNet& model, const std::filesystem::path& path) {
  TensorArchive a;
  const auto& spec = model->spec();
  a.header["kind"] = "unet";
  a.header["n_classes"] = spec.n_classes;
  a.header["in_channels"] = spec.in_channels;
  a.header["base_channels"] = spec.base_channels;
  for (const auto& p : model->named_parameters()) a.put(p.key(), p.value());
  for (const auto& b : model->named_buffers()) a.put(b.key(), b.value());
  a.save(path);
}

UNet load_unet(const std::filesystem::path& path) {
  auto a = TensorArchive::load(path);
  require(a.header.value("kind", "") == "unet", ErrorCode::invalid_argument,
          "archive is not a UNet model");
  UNetSpec spec{a.header.at("n_classes").get<int64_t>(), a.header.at("in_channels").get<int64_t>(),
                a.header.at("base_channels").get<int64_t>()};
  auto net = build_unet(spec);
  torch::NoGradGuard ng;
  auto copy = [&](const std::string& name, torch::Tensor dst) {
    const auto& src = a.get(name);
    require(src.sizes() == dst.sizes(), ErrorCode::shape_mismatch,
            "UNet archive: shape mismatch for " + name);
    dst.copy_(src);
  };
  for (auto& p : net->named_parameters()) copy(p.key(), p.value());
  for (auto& b : net->named_buffers()) copy(b.key(), b.value());
  return net;
}

Image quantize_8bit(const Image& image) {
  auto q = ((image.pixels.to(torch::kFloat32).clamp(-1, 1) + 1) * 127.5).round();
  return Image{(q / 127.5 - 1.0).contiguous()};
}

std::vector<DistilledSample> generate_distilled_dataset(const GeneratorHandle& gen,
                                                        const SegmenterModel& teacher,
                                                        const LayerSelection& sel, int64_t n,
                                                        uint64_t rng_seed,
                                                        const std::filesystem::path& root,
                                                        const DistillOptions& opts) {
  require(n >= 1, ErrorCode::invalid_argument, "distilled dataset size must be >= 1");
  const auto ids = resolve_selection(sel, gen.layer_table());
  int64_t channels = 0;
  for (const auto& l : gen.layer_table())
    if (std::find(ids.begin(), ids.end(), l.id) != ids.end()) channels += l.channels;
  require(channels == teacher.spec().input_channels, ErrorCode::shape_mismatch,
          "teacher expects " + std::to_string(teacher.spec().input_channels) +
              " channels but the selection yields " + std::to_string(channels));

  std::vector<DistilledSample> out;
  out.reserve(n);
  for (int64_t i = 0; i < n; ++i) {
    DistilledSample s;
    s.id = i;
    s.seed = mix_seed(rng_seed, static_cast<uint64_t>(i));
    s.latent = sample_latent(gen, s.seed);
    auto g = generate_with_taps(gen, s.latent, sel);
    auto rep = extract_representation(g.stack, sel, opts.extract);
    auto logits = predict(teacher, rep);
    s.image = quantize_8bit(g.image);
    s.target = opts.skip_upsample
                   ? logits
                   : LogitMap{resample_bilinear(logits.scores,
                                                {g.image.height(), g.image.width()})
                                  .contiguous()};

    if (!root.empty()) {
      ManifestRecord rec;
      rec.id = i;
      rec.seed = s.seed;
      rec.n_classes = static_cast<int>(s.target.n_classes());
      rec.image_path = "images/" + padded_id(i) + ".png";
      rec.target_path = "targets/" + padded_id(i) + ".psta";
      const auto png = encode_png_rgb(s.image);
      TensorArchive t;
      t.header["kind"] = "distill_target";
      t.header["seed"] = s.seed;
      t.header["upsampled"] = !opts.skip_upsample;
      t.put("logits", s.target.scores);
      t.put("latent", s.latent.values);
      const auto target_bytes = t.serialize();
      write_file_atomic(root / rec.image_path, png);
      write_file_atomic(root / rec.target_path, target_bytes);
      rec.checksum = hex32(crc32_of(png + target_bytes));
      append_manifest(root, rec);
      s.checksum = rec.checksum;
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<DistilledSample> load_distilled_dataset(const std::filesystem::path& root) {
  std::vector<DistilledSample> out;
  for (const auto& rec : read_manifest_strict(root)) {
    DistilledSample s;
    s.id = rec.id;
    s.seed = rec.seed;
    s.checksum = rec.checksum;
    s.image = load_image(root / rec.image_path);
    auto t = TensorArchive::load(root / rec.target_path);
    s.target = LogitMap{t.get("logits")};
    s.latent = LatentCode{t.get("latent"), LatentSpace::input};
    require(s.target.n_classes() == rec.n_classes, ErrorCode::corrupt,
            "manifest record " + std::to_string(rec.id) + ": class count mismatch");
    out.push_back(std::move(s));
  }
  return out;
}

std::string to_string(TargetMode m) { return m == TargetMode::logits ? "logits" : "one_hot"; }

TargetMode parse_target_mode(const std::string& text) {
  if (text == "logits") return TargetMode::logits;
  if (text == "one_hot" || text == "one-hot") return TargetMode::one_hot;
  fail(ErrorCode::invalid_argument, "unknown target mode '" + text + "'");
}

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience)
    : lr_(lr), factor_(factor), patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  require(lr > 0 && factor > 0 && patience >= 1, ErrorCode::invalid_argument,
          "plateau scheduler needs positive lr, factor and patience");
}

bool PlateauScheduler::observe(double validation_loss) {
  if (validation_loss < best_) {
    best_ = validation_loss;
    bad_epochs_ = 0;
    return false;
  }
  if (++bad_epochs_ < patience_) return false;
  lr_ *= factor_;
  ++decays_;
  bad_epochs_ = 0;
  return true;
}

torch::Tensor distillation_loss(const torch::Tensor& logits, const torch::Tensor& target,
                                TargetMode mode) {
  require(logits.sizes() == target.sizes(), ErrorCode::shape_mismatch,
          "prediction and target shapes differ");
  if (mode == TargetMode::logits) {
    auto p = torch::softmax(target, 1);
    return -(p * torch::log_softmax(logits, 1)).sum(1).mean();
  }
  g_target_argmax_count.fetch_add(1);
  auto labels = target.argmax(1);
  auto flat = (target.amax(1) - target.amin(1)) == 0;
  labels = labels.masked_fill(flat, -100);
  if (!(labels != -100).any().item<bool>()) return (logits * 0).sum();
  return F::cross_entropy(logits, labels, F::CrossEntropyFuncOptions().ignore_index(-100));
}

std::pair<std::vector<size_t>, std::vector<size_t>> split_validation(size_t n, double fraction,
                                                                     uint64_t seed) {
  require(fraction > 0 && fraction < 1, ErrorCode::invalid_argument,
          "validation_fraction must be in (0, 1)");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x7a11));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<size_t>(std::floor(fraction * static_cast<double>(n)));
  std::vector<size_t> val(order.begin(), order.begin() + n_val);
  std::vector<size_t> train(order.begin() + n_val, order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train, val};
}

AutoShotTrace train_autoshot(UNet& model, const std::vector<DistilledSample>& dataset,
                             const AugmentationConfig& aug, const AutoShotTrainConfig& cfg,
                             const EpochLossFn& on_epoch) {
  require(!dataset.empty(), ErrorCode::invalid_argument, "train_autoshot: empty dataset");
  require(cfg.epochs >= 1 && cfg.base_lr > 0 && cfg.batch_size >= 1, ErrorCode::invalid_argument,
          "train_autoshot: invalid config");
  validate(aug);
  const auto n_classes = model->spec().n_classes;
  const auto h = dataset.front().image.height(), w = dataset.front().image.width();
  for (const auto& s : dataset) {
    require(s.target.n_classes() == n_classes, ErrorCode::shape_mismatch,
            "sample " + std::to_string(s.id) + ": target has " +
                std::to_string(s.target.n_classes()) + " classes, model " +
                std::to_string(n_classes));
    require(s.image.height() == h && s.image.width() == w && s.target.height() == h &&
                s.target.width() == w,
            ErrorCode::shape_mismatch,
            "sample " + std::to_string(s.id) + ": image/target sizes differ from the dataset");
  }
  auto [train_idx, val_idx] = split_validation(dataset.size(), cfg.validation_fraction, cfg.rng_seed);
  require(!train_idx.empty(), ErrorCode::invalid_argument,
          "train_autoshot: every sample landed in the validation split");

  AutoShotTrace trace;
  for (auto i : train_idx) trace.train_ids.push_back(dataset[i].id);
  for (auto i : val_idx) trace.validation_ids.push_back(dataset[i].id);

  torch::Tensor val_images, val_targets;
  if (!val_idx.empty()) {
    std::vector<torch::Tensor> im, tg;
    for (auto i : val_idx) {
      im.push_back(dataset[i].image.pixels);
      tg.push_back(dataset[i].target.scores);
    }
    val_images = torch::stack(im);
    val_targets = torch::stack(tg);
  }

  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.base_lr));
  PlateauScheduler plateau(cfg.base_lr, cfg.plateau_decay_factor, cfg.plateau_patience);
  std::vector<size_t> order = train_idx;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (auto& group : opt.param_groups())
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(plateau.lr());
    std::mt19937_64 shuffle_rng(mix_seed(cfg.rng_seed, 0x5000 + static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    model->train();
    double sum = 0.0;
    size_t batches = 0;
    for (size_t b = 0, end = 0; b < order.size(); b = end) {
      end = std::min(order.size(), b + cfg.batch_size);
      if (order.size() - end == 1) end = order.size();  // no single-sample batches
      std::vector<torch::Tensor> im, tg;
      for (size_t k = b; k < end; ++k) {
        const auto& s = dataset[order[k]];
        if (cfg.augment) {
          // Independent stream per (seed, sample, epoch).
          std::mt19937_64 rng(mix_seed(mix_seed(cfg.rng_seed, static_cast<uint64_t>(s.id)),
                                       static_cast<uint64_t>(epoch)));
          auto a = augment(s, aug, rng);
          im.push_back(a.image.pixels);
          tg.push_back(a.target.scores);
        } else {
          im.push_back(s.image.pixels);
          tg.push_back(s.target.scores);
        }
      }
      opt.zero_grad();
      auto loss = distillation_loss(model->forward(torch::stack(im)), torch::stack(tg),
                                    cfg.target_mode);
      loss.backward();
      opt.step();
      sum += loss.item<double>();
      ++batches;
    }
    const double train_loss = sum / static_cast<double>(batches);
    require(std::isfinite(train_loss), ErrorCode::numerical, "train_autoshot: non-finite loss");

    double val_loss = train_loss;
    if (!val_idx.empty()) {
      torch::NoGradGuard ng;
      model->eval();
      val_loss = distillation_loss(model->forward(val_images), val_targets, cfg.target_mode)
                     .item<double>();
    }
    trace.train_loss.push_back(train_loss);
    trace.validation_loss.push_back(val_loss);
    trace.lr.push_back(plateau.lr());
    if (plateau.observe(val_loss)) trace.decay_epochs.push_back(epoch);
    if (on_epoch) on_epoch(epoch, cfg.epochs, train_loss, val_loss);
  }
  model->eval();
  return trace;
}

AutoShotTrace train_supervised_baseline(UNet& model, const std::vector<LabeledImage>& pairs,
                                        const AugmentationConfig& aug, AutoShotTrainConfig cfg,
                                        const EpochLossFn& on_epoch) {
  require(!pairs.empty(), ErrorCode::invalid_argument, "supervised baseline: no labelled images");
  const auto n = model->spec().n_classes;
  std::vector<DistilledSample> samples;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& [image, ann] = pairs[i];
    require(ann.n_classes == n, ErrorCode::invalid_argument,
            "supervised baseline: annotation class count differs from model");
    validate_annotation(ann);
    auto labels = resize_labels_nearest(ann.labels, {image.height(), image.width()}).to(torch::kLong);
    auto ignore = labels == kIgnoreLabel;
    auto onehot = F::one_hot(labels.masked_fill(ignore, 0), n).permute({2, 0, 1}).to(torch::kFloat32);
    onehot = (onehot * aug.background_logit).masked_fill(ignore.unsqueeze(0), 0.0f);
    DistilledSample s;
    s.id = static_cast<int64_t>(i);
    s.image = image;
    s.target = LogitMap{onehot.contiguous()};
    samples.push_back(std::move(s));
  }
  cfg.target_mode = TargetMode::one_hot;
  return train_autoshot(model, samples, aug, cfg, on_epoch);
}

}  // namespace partseg
