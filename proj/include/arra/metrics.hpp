#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "arra/corpus.hpp"
#include "arra/foundation.hpp"
#include "arra/tensor.hpp"

namespace arra::metrics {

// n x D global image features from one source (real corpus, a sampler run, ...).
struct FeatureSet {
  num::Tensor features;
  std::string source;

  void validate() const;  // n >= 2 and finite; warns on stderr when n < D+1
};

FeatureSet features_for(const std::vector<num::Tensor>& images, const found::FoundationEncoder& encoder,
                        std::string source, found::AggMode mode = found::AggMode::cls);

// ||mu_A - mu_B||^2 + Tr(S_A + S_B - 2 (S_A S_B)^{1/2}), the square root taken
// by eigendecomposition of S_A^{1/2} S_B S_A^{1/2}. Eigenvalues below -1e-6
// raise; small negatives clamp to zero.
double frechet_distance(const FeatureSet& a, const FeatureSet& b);

// mean cosine between the CLS image embedding and the global text embedding of
// each pair; needs a cross-modal encoder.
double clip_score(const std::vector<num::Tensor>& images, const std::vector<std::string>& captions,
                  const found::FoundationEncoder& encoder);

// MS-SSIM over 3 dyadic scales (the canonical 5 are undefined at 32 px), 7x7
// Gaussian window sigma 1.5, reflected borders, canonical scale weights
// renormalized to the 3 kept scales; channels averaged. Per-scale means clamp
// at 0 so anticorrelated structure cannot take fractional powers of negatives.
double ms_ssim(const num::Tensor& a, const num::Tensor& b);

// Per-cell readback of a rendered scene: classify each pixel to the nearest
// palette color (or background), take the dominant color's mask, and match it
// against the four shape templates by correlation. Cells whose best match
// stays under the confidence threshold report empty; an all-background canvas
// yields a spec with no objects.
corpus::SceneSpec detect_attributes(const num::Tensor& image,
                                    const corpus::Palette& palette = corpus::kDefaultPalette);

struct AttributeAccuracy {
  double object_recall = 0.0;     // caption objects whose cell holds the right shape
  double position_accuracy = 0.0; // caption objects whose cell holds anything
  double color_accuracy = 0.0;    // caption objects whose cell holds the right color
  double exact_match = 0.0;       // samples whose detected spec equals the caption's exactly
  nlohmann::json to_json() const;
};

// Scores detect_attributes output against parse_caption ground truth, averaged
// over the batch.
AttributeAccuracy attribute_accuracy(const std::vector<num::Tensor>& images,
                                     const std::vector<std::string>& captions,
                                     const corpus::Palette& palette = corpus::kDefaultPalette);

}  // namespace arra::metrics
