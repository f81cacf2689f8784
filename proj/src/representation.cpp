#include "partseg/representation.hpp"

#include <algorithm>

#include "partseg/error.hpp"

namespace partseg {

namespace F = torch::nn::functional;

torch::Tensor resample_bilinear(const torch::Tensor& map, Resolution target) {
  if (map.size(-2) == target.height && map.size(-1) == target.width) return map;
  const bool batched = map.dim() == 4;
  auto in = batched ? map : map.unsqueeze(0);
  auto out = F::interpolate(in, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{target.height, target.width})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
  return batched ? out : out.squeeze(0);
}

namespace {

Resolution output_resolution(const std::vector<LayerInfo>& infos, const ExtractOptions& opts) {
  Resolution largest{0, 0};
  for (const auto& l : infos) {
    largest.height = std::max(largest.height, l.height);
    largest.width = std::max(largest.width, l.width);
  }
  if (!opts.target_res) return largest;
  const auto t = *opts.target_res;
  require(t.height >= 1 && t.width >= 1, ErrorCode::invalid_argument, "target_res must be positive");
  if (!opts.allow_downscale) {
    require(t.height >= largest.height && t.width >= largest.width, ErrorCode::invalid_argument,
            "target_res " + std::to_string(t.height) + "x" + std::to_string(t.width) +
                " is smaller than a selected map (" + std::to_string(largest.height) + "x" +
                std::to_string(largest.width) + ") and downscaling is not enabled");
  }
  return t;
}

}  // namespace

PixelRepresentation extract_representation(const ActivationStack& stack, const LayerSelection& sel,
                                           const ExtractOptions& opts) {
  const auto ids = resolve_selection(sel, stack.selection_table());
  require(!ids.empty(), ErrorCode::invalid_argument, "layer selection resolves to zero layers");

  std::vector<const ActivationEntry*> chosen;
  std::vector<LayerInfo> infos;
  for (int id : ids) {
    auto it = std::find_if(stack.entries.begin(), stack.entries.end(),
                           [&](const auto& e) { return e.info.id == id; });
    require(it != stack.entries.end(), ErrorCode::invalid_argument,
            "layer " + std::to_string(id) + " was selected but not tapped");
    const auto& v = it->value;
    require(v.dim() == 3 && v.size(0) == it->info.channels && v.size(1) == it->info.height &&
                v.size(2) == it->info.width,
            ErrorCode::shape_mismatch,
            "activation for layer " + std::to_string(id) + " does not match its layer info");
    chosen.push_back(&*it);
    infos.push_back(it->info);
  }
  const auto res = output_resolution(infos, opts);

  PixelRepresentation rep;
  rep.source_selection = sel;
  std::vector<torch::Tensor> parts;
  int64_t offset = 0;
  for (const auto* e : chosen) {
    parts.push_back(resample_bilinear(e->value.to(torch::kFloat32), res));
    rep.channel_offsets.push_back({e->info.id, offset, e->info.channels});
    offset += e->info.channels;
  }
  rep.values = torch::cat(parts, 0).contiguous();
  return rep;
}

torch::Tensor extract_batch(const std::vector<torch::Tensor>& acts,
                            const std::vector<LayerInfo>& infos, const ExtractOptions& opts) {
  require(!acts.empty() && acts.size() == infos.size(), ErrorCode::invalid_argument,
          "extract_batch needs one info per activation");
  const auto res = output_resolution(infos, opts);
  std::vector<torch::Tensor> parts;
  for (const auto& a : acts) parts.push_back(resample_bilinear(a.to(torch::kFloat32), res));
  return torch::cat(parts, 1).contiguous();
}

torch::Tensor pixel_feature(const PixelRepresentation& rep, int64_t x, int64_t y) {
  require(x >= 0 && x < rep.width() && y >= 0 && y < rep.height(), ErrorCode::invalid_argument,
          "pixel (" + std::to_string(x) + "," + std::to_string(y) + ") outside " +
              std::to_string(rep.width()) + "x" + std::to_string(rep.height()) + " representation");
  return rep.values.index({torch::indexing::Slice(), y, x}).clone();
}

ChannelStats fit_channel_stats(std::span<const PixelRepresentation> reps) {
  require(!reps.empty(), ErrorCode::invalid_argument, "fit_channel_stats needs representations");
  std::vector<torch::Tensor> flat;
  for (const auto& r : reps) flat.push_back(r.values.flatten(1));
  auto all = torch::cat(flat, 1);
  return {all.mean(1), all.std(1, false).clamp_min(1e-6)};
}

torch::Tensor apply_channel_stats(const torch::Tensor& values, const ChannelStats& stats) {
  const int64_t c = stats.mean.numel();
  auto shape = values.dim() == 4 ? std::vector<int64_t>{1, c, 1, 1} : std::vector<int64_t>{c, 1, 1};
  return (values - stats.mean.view(shape)) / stats.std.view(shape);
}

TensorArchive representation_archive(const PixelRepresentation& rep) {
  TensorArchive a;
  a.header["kind"] = "representation";
  nlohmann::json offsets = nlohmann::json::array();
  for (const auto& s : rep.channel_offsets)
    offsets.push_back({{"layer", s.layer_id}, {"start", s.start}, {"length", s.length}});
  a.header["representation"] = {{"height", rep.height()},
                                {"width", rep.width()},
                                {"offsets", offsets},
                                {"selection", to_string(rep.source_selection)}};
  a.put("values", rep.values);
  return a;
}

PixelRepresentation representation_from_archive(const TensorArchive& a) {
  require(a.header.value("kind", "") == "representation", ErrorCode::invalid_argument,
          "archive is not a representation");
  PixelRepresentation rep;
  rep.values = a.get("values");
  const auto& m = a.header.at("representation");
  for (const auto& o : m.at("offsets"))
    rep.channel_offsets.push_back(
        {o.at("layer").get<int>(), o.at("start").get<int64_t>(), o.at("length").get<int64_t>()});
  rep.source_selection = parse_selection(m.at("selection").get<std::string>());
  require(rep.values.dim() == 3 && rep.height() == m.at("height").get<int64_t>() &&
              rep.width() == m.at("width").get<int64_t>(),
          ErrorCode::shape_mismatch, "representation archive shape disagrees with manifest");
  return rep;
}

}  // namespace partseg
