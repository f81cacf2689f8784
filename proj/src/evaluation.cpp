#include "partseg/evaluation.hpp"

#include "partseg/error.hpp"

namespace partseg {
namespace {

void check_pair(const PartAnnotation& pred, const PartAnnotation& gt) {
  require(pred.labels.dim() == 2 && gt.labels.dim() == 2 &&
              pred.labels.sizes() == gt.labels.sizes(),
          ErrorCode::shape_mismatch, "prediction and ground truth shapes differ");
  require(pred.labels.scalar_type() == torch::kUInt8 && gt.labels.scalar_type() == torch::kUInt8,
          ErrorCode::invalid_argument, "label tensors must be uint8");
}

}  // namespace

std::optional<double> iou(const PartAnnotation& pred, const PartAnnotation& gt, int class_id) {
  check_pair(pred, gt);
  auto p = pred.labels.contiguous();
  auto g = gt.labels.contiguous();
  const uint8_t* pp = p.data_ptr<uint8_t>();
  const uint8_t* gp = g.data_ptr<uint8_t>();
  int64_t inter = 0, uni = 0;
  for (int64_t i = 0; i < p.numel(); ++i) {
    if (gp[i] == kIgnoreLabel) continue;
    const bool a = pp[i] == class_id, b = gp[i] == class_id;
    inter += a && b;
    uni += a || b;
  }
  if (uni == 0) return std::nullopt;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

IouAccumulator::IouAccumulator(int n_classes)
    : n_classes_(n_classes), intersection_(n_classes), union_(n_classes), gt_count_(n_classes) {
  require(n_classes >= 1 && n_classes <= 255, ErrorCode::invalid_argument, "bad class count");
}

void IouAccumulator::add(const PartAnnotation& pred, const PartAnnotation& gt) {
  check_pair(pred, gt);
  auto p = pred.labels.contiguous();
  auto g = gt.labels.contiguous();
  const uint8_t* pp = p.data_ptr<uint8_t>();
  const uint8_t* gp = g.data_ptr<uint8_t>();
  for (int64_t i = 0; i < p.numel(); ++i) {
    const int gv = gp[i];
    if (gv == kIgnoreLabel) continue;
    const int pv = pp[i];
    require(gv < n_classes_, ErrorCode::invalid_argument,
            "ground-truth class " + std::to_string(gv) + " out of range");
    ++gt_count_[gv];
    if (pv == gv) {
      ++intersection_[gv];
      ++union_[gv];
    } else {
      ++union_[gv];
      if (pv < n_classes_) ++union_[pv];
    }
  }
}

IouReport IouAccumulator::report(const std::set<int>& excluded) const {
  IouReport r;
  r.excluded = excluded;
  int64_t total = 0;
  for (int c = 0; c < n_classes_; ++c) {
    r.pixel_counts[c] = gt_count_[c];
    r.per_class[c] = union_[c] == 0 ? std::nullopt
                                    : std::optional<double>(static_cast<double>(intersection_[c]) /
                                                            static_cast<double>(union_[c]));
    if (!excluded.contains(c)) total += gt_count_[c];
  }
  require(total > 0, ErrorCode::invalid_argument,
          "ground truth has no labelled pixels outside the excluded classes");
  double sum = 0.0;
  for (int c = 0; c < n_classes_; ++c) {
    const bool counted = !excluded.contains(c) && gt_count_[c] > 0;
    r.class_weights[c] = counted ? static_cast<double>(gt_count_[c]) / total : 0.0;
    if (counted) sum += static_cast<double>(gt_count_[c]) * r.per_class[c].value_or(0.0);
  }
  r.weighted = sum / static_cast<double>(total);
  return r;
}

nlohmann::json IouReport::to_json() const {
  nlohmann::json j;
  nlohmann::json pc = nlohmann::json::object(), w = nlohmann::json::object(),
                 counts = nlohmann::json::object();
  for (const auto& [c, v] : per_class) pc[std::to_string(c)] = v ? nlohmann::json(*v) : nlohmann::json();
  for (const auto& [c, v] : class_weights) w[std::to_string(c)] = v;
  for (const auto& [c, v] : pixel_counts) counts[std::to_string(c)] = v;
  j["per_class"] = pc;
  j["weights"] = w;
  j["weighted"] = weighted;
  j["excluded"] = std::vector<int>(excluded.begin(), excluded.end());
  j["pixel_counts"] = counts;
  return j;
}

IouReport weighted_iou(const PartAnnotation& pred, const PartAnnotation& gt,
                       const std::set<int>& excluded) {
  check_pair(pred, gt);
  IouAccumulator acc(std::max(pred.n_classes, gt.n_classes));
  acc.add(pred, gt);
  return acc.report(excluded);
}

double mean_iou_excluding(const PartAnnotation& pred, const PartAnnotation& gt,
                          const std::set<int>& excluded) {
  check_pair(pred, gt);
  const int n = std::max(pred.n_classes, gt.n_classes);
  double sum = 0.0;
  int count = 0;
  for (int c = 0; c < n; ++c) {
    if (excluded.contains(c)) continue;
    if (auto v = iou(pred, gt, c)) {
      sum += *v;
      ++count;
    }
  }
  require(count > 0, ErrorCode::invalid_argument,
          "mean_iou_excluding: every class is excluded or undefined");
  return sum / count;
}

double box_iou(const Box& a, const Box& b) {
  const Box inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
                  std::min(a.y1, b.y1)};
  const int64_t i = (inter.x1 > inter.x0 && inter.y1 > inter.y0) ? inter.area() : 0;
  const int64_t u = a.area() + b.area() - i;
  return u == 0 ? 0.0 : static_cast<double>(i) / static_cast<double>(u);
}

std::vector<EvaluationCrop> crop_filter(const std::vector<AnnotatedScene>& scenes,
                                        const CropFilterRules& rules) {
  require(rules.min_size.height >= 0 && rules.min_size.width >= 0 && rules.max_overlap_iou >= 0,
          ErrorCode::invalid_argument, "crop rules must be non-negative");
  std::vector<EvaluationCrop> out;
  for (size_t s = 0; s < scenes.size(); ++s) {
    const auto& scene = scenes[s];
    const int64_t h = scene.image.height(), w = scene.image.width();
    require(scene.parts.height() == h && scene.parts.width() == w, ErrorCode::shape_mismatch,
            "scene " + std::to_string(s) + ": part labels do not match image size");
    for (size_t o = 0; o < scene.objects.size(); ++o) {
      const auto& b = scene.objects[o].box;
      require(b.x0 >= 0 && b.y0 >= 0 && b.x1 <= w && b.y1 <= h && b.x1 > b.x0 && b.y1 > b.y0,
              ErrorCode::invalid_argument,
              "scene " + std::to_string(s) + " object " + std::to_string(o) + ": malformed box");
      const auto& m = scene.objects[o].mask;
      require(m.defined() && m.dim() == 2 && m.size(0) == h && m.size(1) == w,
              ErrorCode::shape_mismatch,
              "scene " + std::to_string(s) + " object " + std::to_string(o) + ": mask size");
    }
    for (size_t o = 0; o < scene.objects.size(); ++o) {
      const auto& obj = scene.objects[o];
      if (obj.box.height() < rules.min_size.height || obj.box.width() < rules.min_size.width)
        continue;
      bool overlaps = false;
      for (size_t q = 0; q < scene.objects.size() && !overlaps; ++q)
        overlaps = q != o && box_iou(obj.box, scene.objects[q].box) > rules.max_overlap_iou;
      if (overlaps) continue;

      using torch::indexing::Slice;
      const auto ys = Slice(obj.box.y0, obj.box.y1), xs = Slice(obj.box.x0, obj.box.x1);
      auto member = obj.mask.index({ys, xs}).to(torch::kBool);
      auto img = scene.image.pixels.index({Slice(), ys, xs}).clone();
      img = torch::where(member.unsqueeze(0), img, torch::full_like(img, rules.background_fill));
      auto labels = scene.parts.labels.index({ys, xs}).clone();
      labels = torch::where(member, labels, torch::zeros_like(labels));
      out.push_back({s, o, Image{img.contiguous()},
                     PartAnnotation{labels.contiguous(), scene.parts.n_classes,
                                    scene.parts.class_names}});
    }
  }
  return out;
}

}  // namespace partseg
