#include "cil/augment.hpp"

#include <algorithm>
#include <cmath>

namespace cil {

MixMask sample_mask(Eigen::Index h, Eigen::Index w, double lambda_target, Rng& rng) {
  if (h < 1 || w < 1) throw InputError("sample_mask: degenerate image size");
  const double lam = std::clamp(lambda_target, 0.0, 1.0);
  const double cut = std::sqrt(1.0 - lam);
  MixMask m;
  m.height = h;
  m.width = w;
  m.box_w = std::lround(static_cast<double>(w) * cut);
  m.box_h = std::lround(static_cast<double>(h) * cut);
  if (m.box_w > 0 && m.box_h > 0) {
    m.box_x = rng.randint(0, w - m.box_w);
    m.box_y = rng.randint(0, h - m.box_h);
  } else {
    m.box_w = m.box_h = 0;  // empty box, mask is all ones
    m.box_x = m.box_y = 0;
  }
  const Eigen::Index ones = h * w - m.box_w * m.box_h;
  m.lambda_raw = static_cast<double>(ones) / static_cast<double>(h * w);
  return m;
}

double remix_lambda(double lambda_raw, double tau) {
  return lambda_raw > tau ? 1.0 : lambda_raw;
}

MixedSample mix_with_mask(const float* old_img, int old_label, const float* new_img,
                          int new_label, int channels, const MixMask& mask, double tau) {
  if (old_label == new_label)
    throw InputError("mix_with_mask: old and new samples share a class");
  const Eigen::Index h = mask.height, w = mask.width;
  MixedSample out;
  out.old_class = old_label;
  out.new_class = new_label;
  out.lambda_raw = mask.lambda_raw;
  out.lambda_used = remix_lambda(mask.lambda_raw, tau);
  out.image.resize(static_cast<size_t>(channels) * h * w);
  for (int c = 0; c < channels; ++c)
    for (Eigen::Index y = 0; y < h; ++y)
      for (Eigen::Index x = 0; x < w; ++x) {
        const size_t idx = (static_cast<size_t>(c) * h + y) * w + x;
        out.image[idx] = mask.inside_box(y, x) ? new_img[idx] : old_img[idx];
      }
  return out;
}

MixedSample cutmix_pair(const float* old_img, int old_label, const float* new_img, int new_label,
                        int channels, Eigen::Index h, Eigen::Index w, const CutmixConfig& cfg,
                        Rng& rng) {
  const double lambda_target = rng.beta_symmetric(cfg.alpha);
  const MixMask mask = sample_mask(h, w, lambda_target, rng);
  return mix_with_mask(old_img, old_label, new_img, new_label, channels, mask, cfg.tau);
}

std::vector<MixedSample> build_mixed_batch(const ExemplarMemory& memory, const LabeledDataset& ds,
                                           const std::vector<Eigen::Index>& new_sample_indices,
                                           const CutmixConfig& cfg, Rng& rng) {
  std::vector<MixedSample> out;
  const Eigen::Index pool = memory.total_count();
  if (pool == 0) return out;  // nothing stored yet (first round)
  if (memory.channels() != ds.channels || memory.height() != ds.height ||
      memory.width() != ds.width)
    throw InputError("build_mixed_batch: memory and dataset image shapes differ");
  out.reserve(new_sample_indices.size());
  for (Eigen::Index idx : new_sample_indices) {
    if (idx < 0 || idx >= ds.count) throw InputError("build_mixed_batch: index out of range");
    int old_label = -1;
    const float* old_img = memory.sample(rng.randint(0, pool - 1), old_label);
    out.push_back(cutmix_pair(old_img, old_label, ds.image(idx), ds.labels[idx], ds.channels,
                              ds.height, ds.width, cfg, rng));
  }
  return out;
}

}  // namespace cil
