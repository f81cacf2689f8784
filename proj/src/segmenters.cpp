#include "partseg/segmenters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "partseg/error.hpp"

namespace partseg {
namespace {

namespace F = torch::nn::functional;

constexpr double kLeakySlope = 0.2;

bool is_mlp(SegmenterVariant v) {
  return v == SegmenterVariant::MLP0 || v == SegmenterVariant::MLP1 || v == SegmenterVariant::MLP2;
}

std::vector<ConvLayerShape> dilated_stack(int64_t in, const std::vector<int64_t>& channels,
                                          const std::vector<int64_t>& dilations) {
  std::vector<ConvLayerShape> out;
  for (size_t i = 0; i < channels.size(); ++i) {
    out.push_back({in, channels[i], 3, dilations[i], i + 1 < channels.size()});
    in = channels[i];
  }
  return out;
}

}  // namespace

std::string to_string(SegmenterVariant v) {
  switch (v) {
    case SegmenterVariant::MLP0: return "MLP0";
    case SegmenterVariant::MLP1: return "MLP1";
    case SegmenterVariant::MLP2: return "MLP2";
    case SegmenterVariant::CNN_S: return "CNN_S";
    case SegmenterVariant::CNN_M: return "CNN_M";
    case SegmenterVariant::CNN_L: return "CNN_L";
    case SegmenterVariant::CNN_DEFAULT: return "CNN_DEFAULT";
  }
  return "?";
}

SegmenterVariant parse_variant(const std::string& text) {
  for (auto v : {SegmenterVariant::MLP0, SegmenterVariant::MLP1, SegmenterVariant::MLP2,
                 SegmenterVariant::CNN_S, SegmenterVariant::CNN_M, SegmenterVariant::CNN_L,
                 SegmenterVariant::CNN_DEFAULT}) {
    if (to_string(v) == text) return v;
  }
  if (text == "cnn" || text == "CNN") return SegmenterVariant::CNN_DEFAULT;
  if (text == "mlp" || text == "MLP") return SegmenterVariant::MLP2;
  fail(ErrorCode::invalid_argument, "unknown segmenter variant '" + text + "'");
}

std::vector<ConvLayerShape> layer_shapes(const SegmenterSpec& spec) {
  require(spec.input_channels >= 1, ErrorCode::invalid_argument, "segmenter needs C >= 1");
  require(spec.n_classes >= 2, ErrorCode::invalid_argument, "segmenter needs n_classes >= 2");
  const int64_t c = spec.input_channels, n = spec.n_classes;
  switch (spec.variant) {
    case SegmenterVariant::MLP0: return {{c, n, 1, 1, false}};
    case SegmenterVariant::MLP1: return {{c, 2000, 1, 1, true}, {2000, n, 1, 1, false}};
    case SegmenterVariant::MLP2:
      return {{c, 2000, 1, 1, true}, {2000, 200, 1, 1, true}, {200, n, 1, 1, false}};
    case SegmenterVariant::CNN_S:
      return dilated_stack(c, {128, 64, 64, 32, n}, {1, 2, 1, 2, 1});
    case SegmenterVariant::CNN_M:
      return dilated_stack(c, {128, 64, 64, 64, 64, 32, n}, {1, 2, 4, 1, 2, 4, 1});
    case SegmenterVariant::CNN_L:
      return dilated_stack(c, {128, 64, 64, 64, 64, 64, 64, 32, n}, {1, 2, 4, 8, 1, 2, 4, 8, 1});
    case SegmenterVariant::CNN_DEFAULT: {
      // 1x1 linear embedding C -> 128 (no activation), then eight dilated 3x3.
      std::vector<ConvLayerShape> out{{c, 128, 1, 1, false}};
      auto rest = dilated_stack(128, {64, 64, 64, 64, 64, 64, 32, n}, {2, 4, 8, 1, 2, 4, 8, 1});
      out.insert(out.end(), rest.begin(), rest.end());
      return out;
    }
  }
  return {};
}

int64_t receptive_field_radius(const SegmenterSpec& spec) {
  int64_t r = 0;
  for (const auto& l : layer_shapes(spec)) r += l.dilation * (l.kernel - 1) / 2;
  return r;
}

SegmenterNetImpl::SegmenterNetImpl(const SegmenterSpec& spec)
    : spec_(spec), shapes_(layer_shapes(spec)) {
  for (size_t i = 0; i < shapes_.size(); ++i) {
    const auto& s = shapes_[i];
    const auto name = "layer" + std::to_string(i);
    if (is_mlp(spec.variant)) {
      linears_.push_back(register_module(name, torch::nn::Linear(s.in_channels, s.out_channels)));
    } else {
      convs_.push_back(register_module(
          name, torch::nn::Conv2d(torch::nn::Conv2dOptions(s.in_channels, s.out_channels, s.kernel)
                                      .dilation(s.dilation)
                                      .padding(s.dilation * (s.kernel - 1) / 2))));
    }
  }
}

torch::Tensor SegmenterNetImpl::forward_mlp(const torch::Tensor& x) {
  // Rows are pixels; every pixel goes through the same dense stack.
  const auto n = x.size(0), h = x.size(2), w = x.size(3);
  auto rows = x.permute({0, 2, 3, 1}).reshape({n * h * w, x.size(1)});
  for (size_t i = 0; i < linears_.size(); ++i) {
    rows = linears_[i](rows);
    if (shapes_[i].activation) rows = torch::relu(rows);
  }
  return rows.view({n, h, w, spec_.n_classes}).permute({0, 3, 1, 2}).contiguous();
}

torch::Tensor SegmenterNetImpl::forward(torch::Tensor x) {
  require(x.dim() == 4 && x.size(1) == spec_.input_channels, ErrorCode::shape_mismatch,
          "segmenter expects " + std::to_string(spec_.input_channels) + " input channels, got " +
              std::to_string(x.dim() == 4 ? x.size(1) : -1));
  if (is_mlp(spec_.variant)) return forward_mlp(x);
  for (size_t i = 0; i < convs_.size(); ++i) {
    x = convs_[i](x);
    if (shapes_[i].activation)
      x = F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
  }
  return x;
}

SegmenterModel build_segmenter(const SegmenterSpec& spec, uint64_t seed) {
  layer_shapes(spec);  // validates
  torch::manual_seed(seed);
  SegmenterModel model{SegmenterNet(spec), std::nullopt};
  model.net->eval();
  return model;
}

double lr_at_epoch(const FewShotTrainConfig& cfg, int epoch) {
  const double lr = cfg.base_lr * std::pow(cfg.lr_decay_factor, -std::floor(epoch / cfg.lr_decay_every));
  return std::max(lr, cfg.lr_floor);
}

namespace {

torch::Tensor prepared_input(const SegmenterModel& model, const torch::Tensor& values) {
  auto x = values.dim() == 3 ? values.unsqueeze(0) : values;
  if (model.stats) x = apply_channel_stats(x, *model.stats);
  return x;
}

}  // namespace

FewShotTrace train_fewshot(SegmenterModel& model, const std::vector<TrainingPair>& pairs,
                           const FewShotTrainConfig& cfg, const EpochCallback& on_epoch) {
  require(!pairs.empty(), ErrorCode::invalid_argument, "train_fewshot: no training pairs");
  require(cfg.epochs >= 1 && cfg.base_lr > 0 && cfg.lr_decay_factor > 0 && cfg.lr_decay_every > 0 &&
              cfg.weight_decay >= 0,
          ErrorCode::invalid_argument, "train_fewshot: invalid config");
  const auto& spec = model.spec();

  std::vector<torch::Tensor> inputs, targets;
  std::vector<PixelRepresentation> reps;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& [rep, ann] = pairs[i];
    require(rep.channels() == spec.input_channels, ErrorCode::shape_mismatch,
            "pair " + std::to_string(i) + ": representation has " + std::to_string(rep.channels()) +
                " channels, segmenter expects " + std::to_string(spec.input_channels));
    require(ann.n_classes == spec.n_classes, ErrorCode::invalid_argument,
            "pair " + std::to_string(i) + ": annotation n_classes differs from segmenter");
    validate_annotation(ann);
    auto labels = resize_labels_nearest(ann.labels, rep.resolution());
    require((labels != kIgnoreLabel).any().item<bool>(), ErrorCode::invalid_argument,
            "pair " + std::to_string(i) + ": annotation is entirely ignore");
    targets.push_back(labels.to(torch::kLong).unsqueeze(0));
    reps.push_back(rep);
  }
  model.stats.reset();
  if (cfg.standardize) model.stats = fit_channel_stats(reps);
  for (const auto& r : reps) inputs.push_back(prepared_input(model, r.values));

  auto& net = model.net;
  net->train();
  torch::optim::Adam opt(net->parameters(),
                         torch::optim::AdamOptions(cfg.base_lr).weight_decay(cfg.weight_decay));
  std::mt19937_64 rng(cfg.rng_seed);
  std::vector<size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  FewShotTrace trace;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    for (auto& group : opt.param_groups())
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (size_t i : order) {
      opt.zero_grad();
      auto logits = net->forward(inputs[i]);
      auto loss = F::cross_entropy(logits, targets[i],
                                   F::CrossEntropyFuncOptions().ignore_index(kIgnoreLabel));
      loss.backward();
      opt.step();
      sum += loss.item<double>();
    }
    const double mean = sum / static_cast<double>(pairs.size());
    require(std::isfinite(mean), ErrorCode::numerical, "train_fewshot: loss became non-finite");
    trace.epoch_loss.push_back(mean);
    trace.epoch_lr.push_back(lr);
    if (on_epoch) on_epoch(epoch, cfg.epochs, mean);
  }
  net->eval();
  return trace;
}

torch::Tensor predict_batch(const SegmenterModel& model, const torch::Tensor& reps) {
  torch::NoGradGuard ng;
  auto net = model.net;  // holder copy shares the module
  net->eval();
  return net->forward(prepared_input(model, reps));
}

LogitMap predict(const SegmenterModel& model, const PixelRepresentation& rep) {
  require(rep.channels() == model.spec().input_channels, ErrorCode::shape_mismatch,
          "predict: representation has " + std::to_string(rep.channels()) +
              " channels, segmenter expects " + std::to_string(model.spec().input_channels));
  return LogitMap{predict_batch(model, rep.values)[0]};
}

PartAnnotation logits_to_mask(const LogitMap& logits) {
  require(logits.scores.dim() == 3, ErrorCode::shape_mismatch, "logits must be (n, H, W)");
  require(torch::isfinite(logits.scores).all().item<bool>(), ErrorCode::numerical,
          "logits_to_mask: non-finite logits");
  auto s = logits.scores.to(torch::kFloat32).contiguous();
  const int64_t n = s.size(0), h = s.size(1), w = s.size(2);
  auto labels = torch::zeros({h, w}, torch::kUInt8);
  auto acc = s.accessor<float, 3>();
  auto out = labels.accessor<uint8_t, 2>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      int64_t best = 0;
      for (int64_t c = 1; c < n; ++c)
        if (acc[c][y][x] > acc[best][y][x]) best = c;  // strict: ties keep the lower index
      out[y][x] = static_cast<uint8_t>(best);
    }
  }
  return PartAnnotation{labels, static_cast<int>(n), {}};
}

double pixel_accuracy(const LogitMap& logits, const PartAnnotation& ann) {
  auto pred = logits_to_mask(logits).labels;
  auto gt = resize_labels_nearest(ann.labels, {pred.size(0), pred.size(1)});
  auto valid = gt != kIgnoreLabel;
  const auto total = valid.sum().item<int64_t>();
  require(total > 0, ErrorCode::invalid_argument, "pixel_accuracy: no labelled pixels");
  return static_cast<double>(((pred == gt) & valid).sum().item<int64_t>()) / total;
}

TensorArchive segmenter_archive(const SegmenterModel& model) {
  TensorArchive a;
  const auto& spec = model.spec();
  a.header["kind"] = "segmenter";
  a.header["variant"] = to_string(spec.variant);
  a.header["input_channels"] = spec.input_channels;
  a.header["n_classes"] = spec.n_classes;
  a.header["standardize"] = model.stats.has_value();
  for (const auto& p : model.net->named_parameters()) a.put(p.key(), p.value());
  if (model.stats) {
    a.put("norm.mean", model.stats->mean);
    a.put("norm.std", model.stats->std);
  }
  return a;
}

SegmenterModel segmenter_from_archive(const TensorArchive& a) {
  require(a.header.value("kind", "") == "segmenter", ErrorCode::invalid_argument,
          "archive is not a segmenter model");
  SegmenterSpec spec;
  try {
    spec.variant = parse_variant(a.header.at("variant").get<std::string>());
    spec.input_channels = a.header.at("input_channels").get<int64_t>();
    spec.n_classes = a.header.at("n_classes").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::corrupt, std::string("segmenter header: ") + e.what());
  }
  auto model = build_segmenter(spec);
  torch::NoGradGuard ng;
  for (auto& p : model.net->named_parameters()) {
    const auto& src = a.get(p.key());
    require(src.sizes() == p.value().sizes(), ErrorCode::shape_mismatch,
            "segmenter archive: shape mismatch for " + p.key());
    p.value().copy_(src);
  }
  if (a.header.value("standardize", false))
    model.stats = ChannelStats{a.get("norm.mean").clone(), a.get("norm.std").clone()};
  return model;
}

void save_segmenter(const SegmenterModel& model, const std::filesystem::path& path) {
  segmenter_archive(model).save(path);
}

SegmenterModel load_segmenter(const std::filesystem::path& path) {
  return segmenter_from_archive(TensorArchive::load(path));
}

}  // namespace partseg
