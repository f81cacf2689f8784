#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "partseg/segmenters.hpp"

using namespace partseg;
using testing::error_code_of;
using testing::TempDir;

namespace {

PixelRepresentation random_rep(int64_t c, int64_t h, int64_t w, uint64_t seed) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(seed);
  PixelRepresentation rep;
  rep.values = torch::randn({c, h, w}, g);
  rep.channel_offsets = {{0, 0, c}};
  return rep;
}

// Labels are a fixed function of the first two channels.
TrainingPair separable_pair(uint64_t seed) {
  auto rep = random_rep(4, 12, 12, seed);
  auto a = rep.values[0] > 0;
  auto b = rep.values[1] > 0;
  auto labels = (a.to(torch::kUInt8) + 2 * b.to(torch::kUInt8)).contiguous();
  return {rep, PartAnnotation{labels, 4, {}}};
}

}  // namespace

TEST_CASE("dilated CNN layer shapes") {
  SegmenterSpec spec{SegmenterVariant::CNN_DEFAULT, 100, 5};
  const auto shapes = layer_shapes(spec);
  REQUIRE(shapes.size() == 9);
  CHECK(shapes[0].kernel == 1);
  CHECK(shapes[0].in_channels == 100);
  CHECK(shapes[0].out_channels == 128);
  CHECK_FALSE(shapes[0].activation);
  std::vector<int64_t> dil;
  for (size_t i = 1; i < shapes.size(); ++i) {
    CHECK(shapes[i].kernel == 3);
    CHECK(shapes[i].in_channels == shapes[i - 1].out_channels);
    dil.push_back(shapes[i].dilation);
  }
  CHECK(dil == std::vector<int64_t>{2, 4, 8, 1, 2, 4, 8, 1});
  CHECK(shapes.back().out_channels == 5);
  CHECK_FALSE(shapes.back().activation);

  CHECK(layer_shapes({SegmenterVariant::CNN_S, 8, 3}).size() == 5);
  CHECK(layer_shapes({SegmenterVariant::CNN_M, 8, 3}).size() == 7);
  CHECK(layer_shapes({SegmenterVariant::CNN_L, 8, 3}).size() == 9);
  CHECK(layer_shapes({SegmenterVariant::MLP1, 8, 3})[0].out_channels == 2000);
  CHECK(layer_shapes({SegmenterVariant::MLP2, 8, 3})[1].out_channels == 200);
  CHECK(error_code_of([] { layer_shapes({SegmenterVariant::MLP0, 0, 3}); }) ==
        ErrorCode::invalid_argument);
}

TEST_CASE("receptive field radius") {
  CHECK(receptive_field_radius({SegmenterVariant::CNN_DEFAULT, 8, 3}) == 30);
  CHECK(receptive_field_radius({SegmenterVariant::CNN_S, 8, 3}) == 7);
  CHECK(receptive_field_radius({SegmenterVariant::CNN_M, 8, 3}) == 15);
  CHECK(receptive_field_radius({SegmenterVariant::CNN_L, 8, 3}) == 31);
  for (auto v : {SegmenterVariant::MLP0, SegmenterVariant::MLP1, SegmenterVariant::MLP2})
    CHECK(receptive_field_radius({v, 8, 3}) == 0);
}

TEST_CASE("impulse response stays inside the receptive field") {
  for (auto v : {SegmenterVariant::CNN_S, SegmenterVariant::CNN_M}) {
    SegmenterSpec spec{v, 2, 3};
    auto model = build_segmenter(spec, 4);
    const int64_t side = 41, mid = 20;
    auto rep = random_rep(2, side, side, 1);
    auto base = predict(model, rep).scores;
    auto poked = rep;
    poked.values = rep.values.clone();
    poked.values[0][mid][mid] += 5.0;
    auto diff = (predict(model, poked).scores - base).abs().amax(0);
    int64_t reach = 0;
    for (int64_t y = 0; y < side; ++y)
      for (int64_t x = 0; x < side; ++x)
        if (diff[y][x].item<float>() > 0)
          reach = std::max(reach, std::max(std::abs(y - mid), std::abs(x - mid)));
    CHECK(reach == receptive_field_radius(spec));
  }
}

TEST_CASE("variant names parse back") {
  for (auto v : {SegmenterVariant::MLP0, SegmenterVariant::MLP1, SegmenterVariant::MLP2,
                 SegmenterVariant::CNN_S, SegmenterVariant::CNN_M, SegmenterVariant::CNN_L,
                 SegmenterVariant::CNN_DEFAULT})
    CHECK(parse_variant(to_string(v)) == v);
  CHECK(error_code_of([] { parse_variant("RNN"); }) == ErrorCode::invalid_argument);
}

TEST_CASE("MLP predictions commute with pixel permutations") {
  std::mt19937_64 rng(21);
  for (auto v : {SegmenterVariant::MLP0, SegmenterVariant::MLP1, SegmenterVariant::MLP2}) {
    auto model = build_segmenter({v, 6, 3}, 5);
    for (int trial = 0; trial < 3; ++trial) {
      auto rep = random_rep(6, 7, 9, rng());
      auto perm = torch::randperm(63, at::make_generator<at::CPUGeneratorImpl>(rng()));
      auto permuted = rep;
      permuted.values = rep.values.flatten(1).index_select(1, perm).view({6, 7, 9});
      auto lhs = predict(model, permuted).scores;
      auto rhs = predict(model, rep).scores.flatten(1).index_select(1, perm).view({3, 7, 9});
      CHECK(torch::equal(lhs, rhs));
    }
  }
}

TEST_CASE("learning rate schedule steps down by the factor") {
  FewShotTrainConfig cfg;
  for (int e = 0; e < 1000; ++e) {
    const double expected = std::max(1e-3 * std::pow(10.0, -std::floor(e / 50.0)), 1e-8);
    CHECK(lr_at_epoch(cfg, e) == doctest::Approx(expected).epsilon(1e-12));
  }
  CHECK(lr_at_epoch(cfg, 49) == doctest::Approx(1e-3));
  CHECK(lr_at_epoch(cfg, 50) == doctest::Approx(1e-4));
  CHECK(lr_at_epoch(cfg, 999) == doctest::Approx(1e-8));
}

TEST_CASE("few-shot training fits a separable labelling") {
  std::vector<TrainingPair> pairs{separable_pair(1), separable_pair(2)};
  for (auto v : {SegmenterVariant::MLP1, SegmenterVariant::CNN_S}) {
    auto model = build_segmenter({v, 4, 4}, 3);
    FewShotTrainConfig cfg;
    cfg.epochs = 120;
    cfg.lr_decay_every = 100;
    int calls = 0;
    auto trace = train_fewshot(model, pairs, cfg, [&](int, int, double) { ++calls; });
    CHECK(calls == 120);
    CHECK(trace.epoch_loss.back() < trace.epoch_loss.front());
    CHECK(pixel_accuracy(predict(model, pairs[0].rep), pairs[0].annotation) > 0.9);
    if (v == SegmenterVariant::MLP1) {
      auto held_out = separable_pair(3);
      CHECK(pixel_accuracy(predict(model, held_out.rep), held_out.annotation) > 0.85);
    }
  }
}

TEST_CASE("few-shot training is reproducible") {
  std::vector<TrainingPair> pairs{separable_pair(1), separable_pair(2)};
  FewShotTrainConfig cfg;
  cfg.epochs = 5;
  cfg.rng_seed = 8;
  auto a = build_segmenter({SegmenterVariant::CNN_S, 4, 4}, 3);
  auto b = build_segmenter({SegmenterVariant::CNN_S, 4, 4}, 3);
  auto ta = train_fewshot(a, pairs, cfg);
  auto tb = train_fewshot(b, pairs, cfg);
  CHECK(ta.epoch_loss == tb.epoch_loss);
  CHECK(torch::equal(predict(a, pairs[0].rep).scores, predict(b, pairs[0].rep).scores));
}

TEST_CASE("few-shot training ignores 255 and rejects unusable input") {
  auto pair = separable_pair(4);
  auto ignored = pair;
  ignored.annotation.labels = pair.annotation.labels.clone();
  ignored.annotation.labels.narrow(0, 0, 6).fill_(kIgnoreLabel);
  FewShotTrainConfig cfg;
  cfg.epochs = 2;
  auto model = build_segmenter({SegmenterVariant::MLP0, 4, 4}, 1);
  train_fewshot(model, {ignored}, cfg);

  CHECK(error_code_of([&] { train_fewshot(model, {}, cfg); }) == ErrorCode::invalid_argument);
  auto all_ignore = pair;
  all_ignore.annotation.labels = torch::full({12, 12}, kIgnoreLabel, torch::kUInt8);
  CHECK(error_code_of([&] { train_fewshot(model, {all_ignore}, cfg); }) ==
        ErrorCode::invalid_argument);
  auto wrong_classes = pair;
  wrong_classes.annotation.n_classes = 5;
  CHECK(error_code_of([&] { train_fewshot(model, {wrong_classes}, cfg); }) ==
        ErrorCode::invalid_argument);
  auto wrong_channels = pair;
  wrong_channels.rep = random_rep(3, 12, 12, 1);
  CHECK(error_code_of([&] { train_fewshot(model, {wrong_channels}, cfg); }) ==
        ErrorCode::shape_mismatch);
}

TEST_CASE("annotations at another resolution are resampled to the representation") {
  auto pair = separable_pair(5);
  pair.annotation.labels = resize_labels_nearest(pair.annotation.labels, {24, 24});
  auto model = build_segmenter({SegmenterVariant::MLP0, 4, 4}, 1);
  FewShotTrainConfig cfg;
  cfg.epochs = 1;
  CHECK(train_fewshot(model, {pair}, cfg).epoch_loss.size() == 1);
}

TEST_CASE("argmax breaks ties to the lowest class and refuses non-finite logits") {
  auto scores = torch::zeros({3, 1, 3});
  scores[1][0][1] = 1;
  scores[2][0][2] = 1;
  scores[1][0][2] = 1;
  auto mask = logits_to_mask(LogitMap{scores}).labels;
  CHECK(mask[0][0].item<int>() == 0);
  CHECK(mask[0][1].item<int>() == 1);
  CHECK(mask[0][2].item<int>() == 1);
  scores[0][0][0] = std::nanf("");
  CHECK(error_code_of([&] { logits_to_mask(LogitMap{scores}); }) == ErrorCode::numerical);
  scores[0][0][0] = INFINITY;
  CHECK(error_code_of([&] { logits_to_mask(LogitMap{scores}); }) == ErrorCode::numerical);
}

TEST_CASE("segmenter archive preserves predictions and standardisation") {
  TempDir dir("segmenter");
  auto pair = separable_pair(6);
  FewShotTrainConfig cfg;
  cfg.epochs = 3;
  cfg.standardize = true;
  auto model = build_segmenter({SegmenterVariant::CNN_S, 4, 4}, 2);
  train_fewshot(model, {pair}, cfg);
  REQUIRE(model.stats.has_value());
  save_segmenter(model, dir / "m.psta");
  auto back = load_segmenter(dir / "m.psta");
  REQUIRE(back.stats.has_value());
  CHECK(torch::equal(predict(back, pair.rep).scores, predict(model, pair.rep).scores));

  auto archive = segmenter_archive(model);
  archive.header["input_channels"] = 5;
  CHECK(error_code_of([&] { segmenter_from_archive(archive); }) == ErrorCode::shape_mismatch);
}

TEST_CASE("prediction checks the channel count") {
  auto model = build_segmenter({SegmenterVariant::MLP0, 4, 2}, 1);
  CHECK(error_code_of([&] { predict(model, random_rep(3, 4, 4, 1)); }) ==
        ErrorCode::shape_mismatch);
}
