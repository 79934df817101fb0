#pragma once

// Replay-oriented CutMix: pastes a box of a new-class image into a stored
// old-class image and soft-labels the result by area, with the label
// coefficient reset to 1.0 whenever the surviving old-image area exceeds the
// threshold, biasing labels toward old classes.

#include <vector>

#include "cil/memory.hpp"
#include "cil/rng.hpp"

namespace cil {

struct MixMask {
  Eigen::Index height = 0, width = 0;
  Eigen::Index box_x = 0, box_y = 0, box_w = 0, box_h = 0;  // zero region
  double lambda_raw = 1.0;  // exact fraction of ones

  bool inside_box(Eigen::Index y, Eigen::Index x) const {
    return y >= box_y && y < box_y + box_h && x >= box_x && x < box_x + box_w;
  }
};

// Box dimensions are round(w*sqrt(1-lambda)) x round(h*sqrt(1-lambda)) —
// the image's own aspect ratio — placed uniformly, fully inside the image.
// lambda_raw is recomputed from the realized integer box.
MixMask sample_mask(Eigen::Index h, Eigen::Index w, double lambda_target, Rng& rng);

// Reset rule: 1.0 whenever lambda_raw is strictly above tau.
double remix_lambda(double lambda_raw, double tau);

struct MixedSample {
  std::vector<float> image;  // channels * h * w
  int old_class = -1;
  int new_class = -1;
  double lambda_raw = 0.0;
  double lambda_used = 0.0;
};

struct CutmixConfig {
  double alpha = 1.0;  // Beta(alpha, alpha) draw for the target area fraction
  double tau = 0.6;
  bool enabled = true;
};

// Pixel-exact mix: mask ones keep the old image, the box takes the new one.
MixedSample mix_with_mask(const float* old_img, int old_label, const float* new_img,
                          int new_label, int channels, const MixMask& mask, double tau);

// Draws the area fraction from Beta(alpha, alpha), then mixes.
MixedSample cutmix_pair(const float* old_img, int old_label, const float* new_img, int new_label,
                        int channels, Eigen::Index h, Eigen::Index w, const CutmixConfig& cfg,
                        Rng& rng);

// One mixed sample per listed new-class sample, with the old partner drawn
// uniformly from the whole memory. Empty memory yields an empty batch.
std::vector<MixedSample> build_mixed_batch(const ExemplarMemory& memory, const LabeledDataset& ds,
                                           const std::vector<Eigen::Index>& new_sample_indices,
                                           const CutmixConfig& cfg, Rng& rng);

}  // namespace cil
