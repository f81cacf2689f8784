#include <doctest.h>

#include <random>

#include "helpers.hpp"
#include "partseg/distillation.hpp"

using namespace partseg;
using testing::error_code_of;
using testing::error_text_of;
using testing::TempDir;

namespace {

DistilledSample random_sample(int64_t n_classes, int64_t h, int64_t w, uint64_t seed) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(seed);
  DistilledSample s;
  s.id = static_cast<int64_t>(seed);
  s.image = Image{torch::rand({3, h, w}, g) * 2 - 1};
  s.target = LogitMap{torch::randn({n_classes, h, w}, g) * 3};
  return s;
}

AugmentationConfig identity_config() {
  AugmentationConfig cfg;
  cfg.hflip_prob = 0;
  cfg.scale = {1, 1};
  cfg.rotation_deg = {0, 0};
  cfg.translate_frac = {0, 0};
  return cfg;
}

GeneratorHandle small_gan() {
  ToyGanArch a;
  a.latent_dim = 16;
  a.base_channels = 32;
  a.min_channels = 8;
  return make_toy_gan(a, 3);
}

}  // namespace

TEST_CASE("sampled augmentations stay inside the configured ranges") {
  AugmentationConfig cfg;
  std::mt19937_64 rng(1);
  int flips = 0, negative_x = 0;
  for (int i = 0; i < 10000; ++i) {
    auto t = sample_transform(cfg, rng);
    CHECK(t.scale >= 0.5);
    CHECK(t.scale <= 2.0);
    CHECK(t.rotation_deg >= -10.0);
    CHECK(t.rotation_deg <= 10.0);
    CHECK(std::abs(t.translate_x) <= 0.5);
    CHECK(std::abs(t.translate_y) <= 0.5);
    flips += t.hflip;
    negative_x += t.translate_x < 0;
  }
  CHECK(flips > 4700);
  CHECK(flips < 5300);
  CHECK(negative_x > 4700);
  CHECK(negative_x < 5300);
}

TEST_CASE("augmentation config validation") {
  AugmentationConfig cfg;
  cfg.scale = {0, 1};
  CHECK(error_code_of([&] { validate(cfg); }) == ErrorCode::invalid_argument);
  cfg = {};
  cfg.hflip_prob = 1.5;
  CHECK(error_code_of([&] { validate(cfg); }) == ErrorCode::invalid_argument);
  cfg = {};
  cfg.rotation_deg = {5, -5};
  CHECK(error_code_of([&] { validate(cfg); }) == ErrorCode::invalid_argument);
}

TEST_CASE("identity augmentation is a no-op") {
  auto s = random_sample(4, 20, 24, 2);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 5; ++i) {
    auto a = augment(s, identity_config(), rng);
    CHECK(torch::equal(a.image.pixels, s.image.pixels));
    CHECK(torch::equal(a.target.scores, s.target.scores));
  }
}

TEST_CASE("horizontal flip is an involution") {
  auto s = random_sample(3, 17, 22, 4);
  GeometricTransform flip;
  flip.hflip = true;
  auto once = apply_transform(s, flip, {});
  CHECK_FALSE(torch::equal(once.image.pixels, s.image.pixels));
  CHECK(torch::equal(once.image.pixels, s.image.pixels.flip({2})));
  auto twice = apply_transform(once, flip, {});
  CHECK(torch::equal(twice.image.pixels, s.image.pixels));
  CHECK(torch::equal(twice.target.scores, s.target.scores));
}

TEST_CASE("image and target move together") {
  auto s = random_sample(3, 32, 32, 5);
  s.target.scores = s.image.pixels.clone();
  AugmentationConfig cfg;
  cfg.fill_value = 0;
  cfg.background_logit = 0;
  std::mt19937_64 rng(6);
  for (int i = 0; i < 20; ++i) {
    auto a = augment(s, cfg, rng);
    CHECK(torch::equal(a.image.pixels, a.target.scores));
  }
}

TEST_CASE("exposed pixels take the fill values") {
  auto s = random_sample(3, 16, 16, 7);
  GeometricTransform shift;
  shift.translate_x = 0.5;  // right by 8 px
  AugmentationConfig cfg;
  cfg.fill_value = -1;
  cfg.background_logit = 10;
  auto a = apply_transform(s, shift, cfg);
  using torch::indexing::Slice;
  auto exposed = a.image.pixels.index({Slice(), Slice(), Slice(0, 7)});
  CHECK(torch::equal(exposed, torch::full_like(exposed, -1.0f)));
  auto bg = a.target.scores.index({0, Slice(), Slice(0, 7)});
  CHECK(torch::equal(bg, torch::full_like(bg, 10.0f)));
  auto parts = a.target.scores.index({Slice(1, 3), Slice(), Slice(0, 7)});
  CHECK(torch::equal(parts, torch::zeros_like(parts)));
  auto moved = a.image.pixels.index({Slice(), Slice(), Slice(8, 16)});
  CHECK(torch::equal(moved, s.image.pixels.index({Slice(), Slice(), Slice(0, 8)})));
}

TEST_CASE("plateau scheduler decays once per patience window") {
  PlateauScheduler flat(1e-3, 0.1, 20);
  int decays = 0;
  for (int e = 0; e < 21; ++e) decays += flat.observe(1.0);
  CHECK(decays == 1);
  CHECK(flat.decay_events() == 1);
  CHECK(flat.lr() == doctest::Approx(1e-4));

  PlateauScheduler improving(1e-3, 0.1, 20);
  for (int e = 0; e < 100; ++e) CHECK_FALSE(improving.observe(1.0 - e * 1e-3));
  CHECK(improving.lr() == 1e-3);

  PlateauScheduler long_flat(1e-3, 0.1, 20);
  for (int e = 0; e < 61; ++e) long_flat.observe(2.0);
  CHECK(long_flat.decay_events() == 3);
  CHECK(error_code_of([] { PlateauScheduler(1e-3, 0.1, 0); }) == ErrorCode::invalid_argument);
}

TEST_CASE("soft targets approach hard ones when the teacher is confident") {
  auto g = at::make_generator<at::CPUGeneratorImpl>(8);
  auto logits = torch::randn({2, 4, 6, 6}, g);
  auto labels = torch::randint(0, 4, {2, 6, 6}, g);
  auto confident = torch::one_hot(labels, 4).permute({0, 3, 1, 2}).to(torch::kFloat32) * 20.0f;
  const auto before = debug::target_argmax_count();
  auto soft = distillation_loss(logits, confident, TargetMode::logits).item<double>();
  CHECK(debug::target_argmax_count() == before);
  auto hard = distillation_loss(logits, confident, TargetMode::one_hot).item<double>();
  CHECK(debug::target_argmax_count() == before + 1);
  CHECK(std::abs(soft - hard) < 1e-3);
}

TEST_CASE("one-hot loss skips pixels whose targets are flat") {
  auto logits = torch::randn({1, 3, 2, 2});
  auto target = torch::zeros({1, 3, 2, 2});
  target[0][1][0][0] = 5;
  auto only_one = distillation_loss(logits, target, TargetMode::one_hot).item<double>();
  auto expected = -torch::log_softmax(logits, 1)[0][1][0][0].item<double>();
  CHECK(only_one == doctest::Approx(expected).epsilon(1e-6));
  CHECK(distillation_loss(logits, torch::zeros_like(target), TargetMode::one_hot).item<double>() == 0.0);
  CHECK(error_code_of([&] { distillation_loss(logits, torch::zeros({1, 2, 2, 2}), TargetMode::logits); }) ==
        ErrorCode::shape_mismatch);
}

TEST_CASE("target modes parse") {
  CHECK(parse_target_mode("logits") == TargetMode::logits);
  CHECK(parse_target_mode("one_hot") == TargetMode::one_hot);
  CHECK(to_string(TargetMode::one_hot) == "one_hot");
  CHECK(error_code_of([] { parse_target_mode("soft"); }) == ErrorCode::invalid_argument);
}

TEST_CASE("UNet layout and shapes") {
  UNet big = build_unet({3, 3, 64}, 1);
  CHECK(big->encoder_channels() == std::vector<int64_t>{64, 128, 256, 512, 512});
  CHECK(big->decoder_channels() == std::vector<int64_t>{512, 256, 128, 64});
  CHECK(UNetImpl::bottleneck_resolution({64, 64}) == Resolution{4, 4});
  CHECK(UNetImpl::bottleneck_resolution({50, 70}) == Resolution{4, 5});

  UNet net = build_unet({5, 3, 4}, 1);
  CHECK(unet_predict_batch(net, torch::zeros({2, 3, 64, 64})).sizes() ==
        torch::IntArrayRef{2, 5, 64, 64});
  CHECK(unet_predict_batch(net, torch::zeros({1, 3, 50, 70})).sizes() ==
        torch::IntArrayRef{1, 5, 50, 70});
  CHECK(error_code_of([&] { unet_predict_batch(net, torch::zeros({1, 3, 15, 32})); }) ==
        ErrorCode::invalid_argument);
  CHECK(error_code_of([&] { unet_predict_batch(net, torch::zeros({1, 1, 32, 32})); }) ==
        ErrorCode::shape_mismatch);
}

TEST_CASE("UNet files keep weights and batch-norm statistics") {
  TempDir dir("unet");
  UNet net = build_unet({3, 3, 4}, 2);
  net->train();
  {
    torch::NoGradGuard ng;
    net->forward(torch::randn({4, 3, 32, 32}));  // moves running statistics
  }
  net->eval();
  save_unet(net, dir / "u.psta");
  auto back = load_unet(dir / "u.psta");
  auto x = torch::randn({1, 3, 32, 32});
  CHECK(torch::equal(unet_predict_batch(back, x), unet_predict_batch(net, x)));
}

TEST_CASE("validation split is deterministic and disjoint") {
  auto [train, val] = split_validation(100, 0.1, 3);
  CHECK(val.size() == 10);
  CHECK(train.size() == 90);
  std::set<size_t> all(train.begin(), train.end());
  all.insert(val.begin(), val.end());
  CHECK(all.size() == 100);
  CHECK(split_validation(100, 0.1, 3).second == val);
  CHECK(split_validation(100, 0.1, 4).second != val);
  CHECK(split_validation(9, 0.1, 3).second.empty());
  CHECK(error_code_of([] { split_validation(10, 0.0, 1); }) == ErrorCode::invalid_argument);
}

TEST_CASE("distilled dataset round trips through disk and detects tampering") {
  TempDir dir("distill");
  auto gen = small_gan();
  const auto sel = LayerSelection::group('B');
  auto teacher = build_segmenter({SegmenterVariant::CNN_S, 8 + 8, 4}, 1);
  auto written = generate_distilled_dataset(gen, teacher, sel, 4, 9, dir.path());
  REQUIRE(written.size() == 4);
  CHECK(written[0].target.height() == 32);
  CHECK(written[0].target.n_classes() == 4);
  CHECK(written[1].seed == mix_seed(9, 1));

  auto loaded = load_distilled_dataset(dir.path());
  REQUIRE(loaded.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(torch::equal(loaded[i].image.pixels, written[i].image.pixels));
    CHECK(torch::equal(loaded[i].target.scores, written[i].target.scores));
    CHECK(torch::equal(loaded[i].latent.values, written[i].latent.values));
    CHECK(loaded[i].checksum == written[i].checksum);
  }
  // The stored latent regenerates the stored image.
  CHECK(torch::equal(quantize_8bit(generate_image(gen, loaded[2].latent)).pixels,
                     loaded[2].image.pixels));

  auto bytes = read_file(dir / "targets/000002.psta");
  bytes[bytes.size() / 2] ^= 0x40;
  write_file_atomic(dir / "targets/000002.psta", bytes);
  auto text = error_text_of([&] { load_distilled_dataset(dir.path()); });
  CHECK(text.find("record 2") != std::string::npos);
}

TEST_CASE("distillation checks the teacher against the selection") {
  auto gen = small_gan();
  auto teacher = build_segmenter({SegmenterVariant::CNN_S, 5, 4}, 1);
  CHECK(error_code_of([&] { generate_distilled_dataset(gen, teacher, LayerSelection::all(), 1, 0); }) ==
        ErrorCode::shape_mismatch);
  DistillOptions opts;
  opts.skip_upsample = true;
  auto t2 = build_segmenter({SegmenterVariant::CNN_S, 32 + 16, 4}, 1);
  auto raw = generate_distilled_dataset(gen, t2, LayerSelection::group('A'), 1, 0, {}, opts);
  CHECK(raw[0].target.height() == 8);
}

TEST_CASE("auto-shot training records its split, losses and schedule") {
  std::vector<DistilledSample> data;
  for (uint64_t i = 0; i < 10; ++i) data.push_back(random_sample(3, 16, 16, 100 + i));
  AutoShotTrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.rng_seed = 5;
  auto a = build_unet({3, 3, 2}, 1);
  int calls = 0;
  const auto before = debug::target_argmax_count();
  auto trace = train_autoshot(a, data, {}, cfg, [&](int, int, double, double) { ++calls; });
  CHECK(debug::target_argmax_count() == before);
  CHECK(calls == 3);
  CHECK(trace.train_loss.size() == 3);
  CHECK(trace.validation_ids.size() == 1);
  CHECK(trace.train_ids.size() == 9);

  auto b = build_unet({3, 3, 2}, 1);
  auto again = train_autoshot(b, data, {}, cfg);
  CHECK(again.train_loss == trace.train_loss);

  cfg.target_mode = TargetMode::one_hot;
  auto c = build_unet({3, 3, 2}, 1);
  train_autoshot(c, data, {}, cfg);
  CHECK(debug::target_argmax_count() > before);

  data[3].target.scores = torch::zeros({4, 16, 16});
  CHECK(error_code_of([&] { train_autoshot(c, data, {}, cfg); }) == ErrorCode::shape_mismatch);
}

TEST_CASE("supervised baseline trains on ground-truth masks") {
  std::vector<LabeledImage> pairs;
  for (uint64_t i = 0; i < 4; ++i) {
    auto s = random_sample(3, 16, 16, 200 + i);
    auto labels = testing::random_labels(16, 16, 3, i);
    labels[0][0] = kIgnoreLabel;
    pairs.push_back({s.image, PartAnnotation{labels, 3, {}}});
  }
  AutoShotTrainConfig cfg;
  cfg.epochs = 2;
  cfg.validation_fraction = 0.25;
  auto net = build_unet({3, 3, 2}, 1);
  auto trace = train_supervised_baseline(net, pairs, identity_config(), cfg);
  CHECK(trace.validation_ids.size() == 1);
  pairs[0].labels.n_classes = 4;
  CHECK(error_code_of([&] { train_supervised_baseline(net, pairs, {}, cfg); }) ==
        ErrorCode::invalid_argument);
}

TEST_CASE("8-bit quantisation is idempotent") {
  auto s = random_sample(2, 8, 8, 9);
  auto q = quantize_8bit(s.image);
  CHECK(torch::equal(quantize_8bit(q).pixels, q.pixels));
  CHECK((q.pixels - s.image.pixels).abs().max().item<float>() <= 1.0f / 127.5f);
}
