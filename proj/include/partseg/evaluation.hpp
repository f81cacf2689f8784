#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "partseg/image_io.hpp"
#include "partseg/types.hpp"

namespace partseg {

// IOU for one class; ignore pixels in gt are dropped from both sets.
// nullopt when the union is empty.
std::optional<double> iou(const PartAnnotation& pred, const PartAnnotation& gt, int class_id);

struct IouReport {
  std::map<int, std::optional<double>> per_class;
  std::map<int, double> class_weights;  // gt pixel fraction, renormalised after exclusion
  std::map<int, int64_t> pixel_counts;  // gt pixels per class
  std::set<int> excluded;
  double weighted = 0.0;

  nlohmann::json to_json() const;
};

// Pools pixel counts across images; weights come from pooled gt fractions.
class IouAccumulator {
 public:
  explicit IouAccumulator(int n_classes);

  void add(const PartAnnotation& pred, const PartAnnotation& gt);
  // Throws when gt had no non-ignore pixels (or all were excluded).
  IouReport report(const std::set<int>& excluded = {}) const;

 private:
  int n_classes_;
  std::vector<int64_t> intersection_, union_, gt_count_;
};

IouReport weighted_iou(const PartAnnotation& pred, const PartAnnotation& gt,
                       const std::set<int>& excluded = {});

// Unweighted mean of defined per-class IOUs outside `excluded`.
double mean_iou_excluding(const PartAnnotation& pred, const PartAnnotation& gt,
                          const std::set<int>& excluded);

// Pixel box, half open: [x0, x1) x [y0, y1).
struct Box {
  int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int64_t width() const { return x1 - x0; }
  int64_t height() const { return y1 - y0; }
  int64_t area() const { return std::max<int64_t>(0, width()) * std::max<int64_t>(0, height()); }
};

double box_iou(const Box& a, const Box& b);

struct SceneObject {
  Box box;
  int class_id = 0;
  torch::Tensor mask;  // bool (H, W) object membership over the full scene
};

// A scene in the artifact's own annotation format: image, part labels over
// the whole image, and one entry per object.
struct AnnotatedScene {
  Image image;
  PartAnnotation parts;
  std::vector<SceneObject> objects;
};

struct CropFilterRules {
  Resolution min_size{50, 50};
  double max_overlap_iou = 0.05;
  float background_fill = -1.0f;  // black in the [-1, 1] image range
  bool exclude_background_in_score = true;
};

struct EvaluationCrop {
  size_t scene_index = 0;
  size_t object_index = 0;
  Image image;
  PartAnnotation labels;  // non-object pixels are background (0)
};

// Crops each surviving object box. Objects smaller than min_size in either
// side, or whose box overlaps another box of the scene with IOU above
// max_overlap_iou, are dropped; non-object pixels get background_fill.
std::vector<EvaluationCrop> crop_filter(const std::vector<AnnotatedScene>& scenes,
                                        const CropFilterRules& rules);

}  // namespace partseg
