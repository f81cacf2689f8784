#pragma once

// Desk-scale experiment protocol shared by the CLI and the acceptance suite.
// Generated toy images carry free ground truth: the synthetic colour scheme
// makes label_by_palette exact on them.

#include <cstdint>
#include <set>
#include <vector>

#include "partseg/datasets.hpp"
#include "partseg/distillation.hpp"
#include "partseg/evaluation.hpp"
#include "partseg/gan_backbone.hpp"
#include "partseg/representation.hpp"
#include "partseg/segmenters.hpp"

namespace partseg {

struct GeneratedExample {
  uint64_t seed = 0;
  LatentCode latent;
  Image image;  // quantised to 8 bits
  PixelRepresentation rep;
  PartAnnotation truth;
};

// Samples mix_seed(seed, i) for i in [0, n).
std::vector<GeneratedExample> generated_examples(const GeneratorHandle& gen,
                                                 const LayerSelection& sel,
                                                 const ExtractOptions& opts, int n, uint64_t seed,
                                                 int n_classes);

std::vector<TrainingPair> as_training_pairs(const std::vector<GeneratedExample>& examples);

// Pixel-coordinate-only representation: channels (x, y) in [-1, 1].
PixelRepresentation coordinate_representation(Resolution res);

// Logits are upsampled bilinearly to the truth resolution before argmax.
// When `per_image` is given it receives each example's own weighted IOU.
IouReport evaluate_segmenter(const SegmenterModel& model,
                             const std::vector<GeneratedExample>& examples,
                             const std::set<int>& excluded = {},
                             std::vector<double>* per_image = nullptr);

// Same, with each example's representation replaced by pixel coordinates.
IouReport evaluate_location_prior(const SegmenterModel& model,
                                  const std::vector<GeneratedExample>& examples,
                                  const std::set<int>& excluded = {});

IouReport evaluate_unet(const UNet& model, const std::vector<GeneratedExample>& examples,
                        const std::set<int>& excluded = {},
                        std::vector<double>* per_image = nullptr);

PartAnnotation predict_mask_at(const LogitMap& logits, Resolution res);

double median(std::vector<double> values);

}  // namespace partseg
