#include <doctest.h>

#include <random>

#include "helpers.hpp"
#include "oracles.hpp"
#include "partseg/gan_backbone.hpp"
#include "partseg/representation.hpp"

using namespace partseg;
using testing::error_code_of;

namespace {

ActivationStack random_stack(std::mt19937_64& rng, int layers) {
  ActivationStack stack;
  std::uniform_int_distribution<int> ch(1, 6);
  for (int i = 0; i < layers; ++i) {
    const int64_t side = int64_t{2} << i;
    LayerInfo info{i, side, side, ch(rng)};
    auto g = at::make_generator<at::CPUGeneratorImpl>(rng());
    stack.entries.push_back({info, torch::randn({info.channels, side, side}, g)});
  }
  return stack;
}

}  // namespace

TEST_CASE("layer groups resolve against the reference table") {
  const auto table = stylegan2_layer_table();
  CHECK(resolve_selection(LayerSelection::group('A'), table) == std::vector<int>{0, 1});
  CHECK(resolve_selection(LayerSelection::group('B'), table) == std::vector<int>{2, 3});
  CHECK(resolve_selection(LayerSelection::group('C'), table) == std::vector<int>{4, 5, 6, 7, 8});
  CHECK(resolve_selection(parse_selection("A-B"), table) == std::vector<int>{0, 1, 2, 3});
  CHECK(resolve_selection(parse_selection("B-C"), table).size() == 7);
  CHECK(resolve_selection(LayerSelection::all_but_last(), table).size() == 8);
  CHECK(resolve_selection(parse_selection("3,1"), table) == std::vector<int>{1, 3});
  CHECK(error_code_of([&] { resolve_selection(parse_selection("12"), table); }) ==
        ErrorCode::invalid_argument);
  CHECK(error_code_of([] { parse_selection("Z"); }) == ErrorCode::invalid_argument);
  CHECK(error_code_of([] { parse_selection("1,x"); }) == ErrorCode::invalid_argument);
  for (const char* s : {"all", "all_but_last", "A", "B", "C", "A-B", "B-C", "0,2"})
    CHECK(to_string(parse_selection(s)) == s);
}

TEST_CASE("a group outside the table resolves to nothing and extraction refuses it") {
  std::mt19937_64 rng(1);
  auto stack = random_stack(rng, 3);  // sides 2, 4, 8
  CHECK(resolve_selection(LayerSelection::group('C'), stack.layer_infos()).empty());
  CHECK(error_code_of([&] { extract_representation(stack, LayerSelection::group('C')); }) ==
        ErrorCode::invalid_argument);
}

TEST_CASE("2x2 to 4x4 bilinear uses half-pixel centres") {
  auto src = torch::tensor({1.0f, 2.0f, 3.0f, 4.0f}).view({1, 2, 2});
  auto out = resample_bilinear(src, {4, 4});
  // Row/column coefficients towards the second source sample: 0, .25, .75, 1.
  const double c[] = {0.0, 0.25, 0.75, 1.0};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double top = 1 + c[x] * (2 - 1);
      const double bottom = 3 + c[x] * (4 - 3);
      const double expected = top + c[y] * (bottom - top);
      CHECK(out[0][y][x].item<double>() == doctest::Approx(expected).epsilon(1e-6));
    }
  CHECK(torch::equal(resample_bilinear(src, {2, 2}), src));
}

TEST_CASE("bilinear matches the loop oracle on random maps") {
  for (uint64_t s = 0; s < 20; ++s) {
    auto g = at::make_generator<at::CPUGeneratorImpl>(s);
    const int64_t h = 1 + s % 5, w = 1 + (s * 7) % 6;
    auto src = torch::randn({3, h, w}, g);
    const int64_t oh = h * (1 + s % 3) + s % 2, ow = w * (1 + (s + 1) % 4);
    auto out = resample_bilinear(src, {oh, ow}).to(torch::kFloat64);
    CHECK((out - oracle::bilinear(src, oh, ow)).abs().max().item<double>() < 1e-6);
  }
}

TEST_CASE("representation stacks channels at the largest selected resolution") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto stack = random_stack(rng, 4);
    std::shuffle(stack.entries.begin(), stack.entries.end(), rng);
    std::vector<int> ids;
    for (int i = 0; i < 4; ++i)
      if (rng() % 2) ids.push_back(i);
    if (ids.empty()) ids.push_back(static_cast<int>(rng() % 4));
    const auto sel = LayerSelection::explicit_layers(ids);
    auto rep = extract_representation(stack, sel);

    int64_t channels = 0, side = 0;
    for (const auto& e : stack.entries)
      if (std::find(ids.begin(), ids.end(), e.info.id) != ids.end()) {
        channels += e.info.channels;
        side = std::max(side, e.info.height);
      }
    CHECK(rep.channels() == channels);
    CHECK(rep.height() == side);
    CHECK(rep.width() == side);

    // Offsets run in increasing layer id and each slice is the resampled map.
    int64_t expect_start = 0;
    int prev_id = -1;
    for (const auto& span : rep.channel_offsets) {
      CHECK(span.layer_id > prev_id);
      CHECK(span.start == expect_start);
      prev_id = span.layer_id;
      expect_start += span.length;
      auto it = std::find_if(stack.entries.begin(), stack.entries.end(),
                             [&](const auto& e) { return e.info.id == span.layer_id; });
      auto slice = rep.values.narrow(0, span.start, span.length).to(torch::kFloat64);
      CHECK((slice - oracle::bilinear(it->value, side, side)).abs().max().item<double>() < 1e-5);
    }
  }
}

TEST_CASE("target resolution refuses silent downscaling") {
  std::mt19937_64 rng(3);
  auto stack = random_stack(rng, 3);  // largest 8x8
  ExtractOptions opts;
  opts.target_res = Resolution{4, 4};
  CHECK(error_code_of([&] { extract_representation(stack, LayerSelection::all(), opts); }) ==
        ErrorCode::invalid_argument);
  opts.allow_downscale = true;
  CHECK(extract_representation(stack, LayerSelection::all(), opts).height() == 4);
  opts = {};
  opts.target_res = Resolution{16, 16};
  CHECK(extract_representation(stack, LayerSelection::all(), opts).width() == 16);
}

TEST_CASE("mismatched activation shapes are reported") {
  std::mt19937_64 rng(5);
  auto stack = random_stack(rng, 2);
  stack.entries[1].info.channels += 1;
  CHECK(error_code_of([&] { extract_representation(stack, LayerSelection::all()); }) ==
        ErrorCode::shape_mismatch);
}

TEST_CASE("pixel features read one column of the representation") {
  std::mt19937_64 rng(9);
  auto rep = extract_representation(random_stack(rng, 3), LayerSelection::all());
  auto f = pixel_feature(rep, 5, 2);
  CHECK(f.size(0) == rep.channels());
  CHECK(torch::equal(f, rep.values.index({torch::indexing::Slice(), 2, 5})));
  CHECK(error_code_of([&] { pixel_feature(rep, rep.width(), 0); }) == ErrorCode::invalid_argument);
}

TEST_CASE("channel statistics standardise the fitted set") {
  std::mt19937_64 rng(11);
  std::vector<PixelRepresentation> reps;
  for (int i = 0; i < 3; ++i) {
    std::mt19937_64 same(11);  // identical layer shapes, different values
    auto stack = random_stack(same, 2);
    for (auto& e : stack.entries) e.value = e.value * (i + 2) + i;
    reps.push_back(extract_representation(stack, LayerSelection::all()));
  }
  auto stats = fit_channel_stats(reps);
  std::vector<torch::Tensor> flat;
  for (const auto& r : reps) flat.push_back(apply_channel_stats(r.values, stats).flatten(1));
  auto all = torch::cat(flat, 1);
  CHECK(all.mean(1).abs().max().item<double>() < 1e-5);
  CHECK((all.std(1, false) - 1).abs().max().item<double>() < 1e-4);
}

TEST_CASE("representation archive round trip") {
  std::mt19937_64 rng(13);
  auto rep = extract_representation(random_stack(rng, 3), parse_selection("0,2"));
  auto back = representation_from_archive(
      TensorArchive::deserialize(representation_archive(rep).serialize()));
  CHECK(torch::equal(back.values, rep.values));
  REQUIRE(back.channel_offsets.size() == rep.channel_offsets.size());
  CHECK(back.channel_offsets[1].start == rep.channel_offsets[1].start);
  CHECK(to_string(back.source_selection) == "0,2");
}
