#include "partseg/desk_protocol.hpp"

#include <algorithm>

#include "partseg/error.hpp"

namespace partseg {

std::vector<GeneratedExample> generated_examples(const GeneratorHandle& gen,
                                                 const LayerSelection& sel,
                                                 const ExtractOptions& opts, int n, uint64_t seed,
                                                 int n_classes) {
  std::vector<GeneratedExample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    GeneratedExample ex;
    ex.seed = mix_seed(seed, static_cast<uint64_t>(i));
    ex.latent = sample_latent(gen, ex.seed);
    auto g = generate_with_taps(gen, ex.latent, sel);
    ex.rep = extract_representation(g.stack, sel, opts);
    ex.image = quantize_8bit(g.image);
    ex.truth = label_by_palette(ex.image, n_classes);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TrainingPair> as_training_pairs(const std::vector<GeneratedExample>& examples) {
  std::vector<TrainingPair> pairs;
  for (const auto& ex : examples) pairs.push_back({ex.rep, ex.truth});
  return pairs;
}

PixelRepresentation coordinate_representation(Resolution res) {
  auto ys = torch::linspace(-1, 1, res.height, torch::kFloat32).view({res.height, 1});
  auto xs = torch::linspace(-1, 1, res.width, torch::kFloat32).view({1, res.width});
  PixelRepresentation rep;
  rep.values = torch::stack({xs.expand({res.height, res.width}), ys.expand({res.height, res.width})})
                   .contiguous();
  rep.channel_offsets = {{-1, 0, 2}};
  rep.source_selection = LayerSelection::explicit_layers({-1});
  return rep;
}

PartAnnotation predict_mask_at(const LogitMap& logits, Resolution res) {
  return logits_to_mask(LogitMap{resample_bilinear(logits.scores, res)});
}

namespace {

void score(IouAccumulator& acc, const PartAnnotation& pred, const PartAnnotation& truth,
           const std::set<int>& excluded, std::vector<double>* per_image) {
  acc.add(pred, truth);
  if (per_image) per_image->push_back(weighted_iou(pred, truth, excluded).weighted);
}

}  // namespace

IouReport evaluate_segmenter(const SegmenterModel& model,
                             const std::vector<GeneratedExample>& examples,
                             const std::set<int>& excluded, std::vector<double>* per_image) {
  require(!examples.empty(), ErrorCode::invalid_argument, "no evaluation examples");
  IouAccumulator acc(static_cast<int>(model.spec().n_classes));
  for (const auto& ex : examples)
    score(acc, predict_mask_at(predict(model, ex.rep), ex.truth.resolution()), ex.truth, excluded,
          per_image);
  return acc.report(excluded);
}

IouReport evaluate_location_prior(const SegmenterModel& model,
                                  const std::vector<GeneratedExample>& examples,
                                  const std::set<int>& excluded) {
  require(!examples.empty(), ErrorCode::invalid_argument, "no evaluation examples");
  IouAccumulator acc(static_cast<int>(model.spec().n_classes));
  for (const auto& ex : examples) {
    auto rep = coordinate_representation(ex.rep.resolution());
    acc.add(predict_mask_at(predict(model, rep), ex.truth.resolution()), ex.truth);
  }
  return acc.report(excluded);
}

IouReport evaluate_unet(const UNet& model, const std::vector<GeneratedExample>& examples,
                        const std::set<int>& excluded, std::vector<double>* per_image) {
  require(!examples.empty(), ErrorCode::invalid_argument, "no evaluation examples");
  IouAccumulator acc(static_cast<int>(model->spec().n_classes));
  for (const auto& ex : examples)
    score(acc, logits_to_mask(unet_predict(model, ex.image)), ex.truth, excluded, per_image);
  return acc.report(excluded);
}

double median(std::vector<double> values) {
  require(!values.empty(), ErrorCode::invalid_argument, "median of nothing");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace partseg
