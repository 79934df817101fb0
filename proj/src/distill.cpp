#include "cil/distill.hpp"

#include <cmath>

namespace cil {

DistanceKind parse_distance_kind(const std::string& s) {
  if (s == "pod") return DistanceKind::pod;
  if (s == "mse") return DistanceKind::mse;
  throw ConfigError("unknown distill.kind '" + s + "' (expected pod|mse)");
}

AttentionVariant parse_attention_variant(const std::string& s) {
  if (s == "block_wise_maps") return AttentionVariant::block_wise_maps;
  if (s == "channel_wise_maps") return AttentionVariant::channel_wise_maps;
  if (s == "block_wise_weights") return AttentionVariant::block_wise_weights;
  if (s == "none") return AttentionVariant::none;
  throw ConfigError("unknown aim.variant '" + s + "'");
}

std::string to_string(DistanceKind k) { return k == DistanceKind::pod ? "pod" : "mse"; }

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::block_wise_maps: return "block_wise_maps";
    case AttentionVariant::channel_wise_maps: return "channel_wise_maps";
    case AttentionVariant::block_wise_weights: return "block_wise_weights";
    case AttentionVariant::none: return "none";
  }
  return "?";
}

Tensor pod_distance(const Tensor& fa, const Tensor& fb) {
  if (fa.shape() != fb.shape())
    throw InputError("pod_distance: shape mismatch " + shape_str(fa.shape()) + " vs " +
                     shape_str(fb.shape()));
  Tensor pw_a = l2_normalize_rows(sqsum_over_w(fa));
  Tensor pw_b = l2_normalize_rows(sqsum_over_w(fb));
  Tensor ph_a = l2_normalize_rows(sqsum_over_h(fa));
  Tensor ph_b = l2_normalize_rows(sqsum_over_h(fb));
  Tensor dw = sub(pw_a, pw_b);
  Tensor dh = sub(ph_a, ph_b);
  Tensor per_sample = add(sum_rows(mul(dw, dw)), sum_rows(mul(dh, dh)));
  return mean_all(affine(per_sample, 0.5, 0.0));
}

Tensor mse_distance(const Tensor& fa, const Tensor& fb) {
  if (fa.shape() != fb.shape())
    throw InputError("mse_distance: shape mismatch " + shape_str(fa.shape()) + " vs " +
                     shape_str(fb.shape()));
  Tensor d = sub(fa, fb);
  return mean_all(mul(d, d));
}

Tensor feature_map_distance(const Tensor& fa, const Tensor& fb, DistanceKind kind) {
  return kind == DistanceKind::pod ? pod_distance(fa, fb) : mse_distance(fa, fb);
}

Tensor block_distill_loss(const std::vector<Tensor>& pyr_new, const std::vector<Tensor>& pyr_old,
                          DistanceKind kind) {
  if (pyr_new.size() != pyr_old.size() || pyr_new.empty())
    throw InputError("block_distill_loss: pyramid length mismatch");
  Tensor acc;
  for (size_t l = 0; l < pyr_new.size(); ++l) {
    Tensor d = feature_map_distance(pyr_new[l], pyr_old[l], kind);
    acc = l == 0 ? d : add(acc, d);
  }
  return affine(acc, 1.0 / static_cast<double>(pyr_new.size()), 0.0);
}

AimModule::AimModule(const BackboneSpec& old_spec, const BackboneSpec& new_spec, int target_block,
                     AttentionVariant variant, Rng& rng)
    : target_block_(target_block),
      num_blocks_(new_spec.num_blocks),
      variant_(variant) {
  if (old_spec.num_blocks != new_spec.num_blocks)
    throw InputError("AimModule: old and new extractors must have the same block count");
  if (target_block < 1 || target_block > new_spec.num_blocks)
    throw InputError("AimModule: target block out of range");
  target_channels_ = new_spec.channels[target_block - 1];
  target_size_ = new_spec.block_spatial(target_block);
  for (int j = 0; j < num_blocks_; ++j)
    transforms_.emplace_back(old_spec.channels[j], target_channels_, 1, 1, 0, rng);
  const int att_in = num_blocks_ * target_channels_;
  switch (variant_) {
    case AttentionVariant::block_wise_maps:
    case AttentionVariant::block_wise_weights:
      attention_ = nn::Conv2d(att_in, num_blocks_, 1, 1, 0, rng);
      break;
    case AttentionVariant::channel_wise_maps:
      attention_ = nn::Conv2d(att_in, att_in, 1, 1, 0, rng);
      break;
    case AttentionVariant::none:
      break;
  }
  output_ = nn::Conv2d(target_channels_, target_channels_, 3, 1, 1, rng);
}

Tensor AimModule::forward(const std::vector<Tensor>& old_pyramid, Tensor* attention_out) const {
  if (static_cast<int>(old_pyramid.size()) != num_blocks_)
    throw InputError("AimModule: pyramid length " + std::to_string(old_pyramid.size()) +
                     " does not match block count " + std::to_string(num_blocks_));
  // Transform every source block to the target channel count, then align
  // spatial sizes: average-pool downward, bilinear upward.
  std::vector<Tensor> aligned;
  aligned.reserve(num_blocks_);
  for (int j = 0; j < num_blocks_; ++j) {
    Tensor t = transforms_[j].forward(old_pyramid[j]);
    const Eigen::Index h = t.dim(2);
    if (h > target_size_)
      t = adaptive_avg_pool(t, target_size_, target_size_);
    else if (h < target_size_)
      t = bilinear_resize(t, target_size_, target_size_);
    aligned.push_back(t);
  }

  Tensor fused;
  if (variant_ == AttentionVariant::none) {
    for (int j = 0; j < num_blocks_; ++j) fused = j == 0 ? aligned[j] : add(fused, aligned[j]);
    fused = affine(fused, 1.0 / static_cast<double>(num_blocks_), 0.0);
  } else {
    Tensor stacked = concat_channels(aligned);
    Tensor att_logits = attention_.forward(stacked);
    if (variant_ == AttentionVariant::block_wise_maps) {
      Tensor maps = softmax_blocks(att_logits, num_blocks_);  // [B, L, h, w]
      if (attention_out != nullptr) *attention_out = maps;
      for (int j = 0; j < num_blocks_; ++j) {
        Tensor term = mul_channel_bcast(aligned[j], slice_channels(maps, j, j + 1));
        fused = j == 0 ? term : add(fused, term);
      }
    } else if (variant_ == AttentionVariant::channel_wise_maps) {
      Tensor maps = softmax_blocks(att_logits, num_blocks_);  // [B, L*c, h, w]
      if (attention_out != nullptr) *attention_out = maps;
      for (int j = 0; j < num_blocks_; ++j) {
        Tensor term =
            mul(aligned[j], slice_channels(maps, j * target_channels_, (j + 1) * target_channels_));
        fused = j == 0 ? term : add(fused, term);
      }
    } else {  // block_wise_weights: one scalar weight per block per sample
      Tensor weights = softmax_rows(global_avg_pool(att_logits));  // [B, L]
      if (attention_out != nullptr) *attention_out = weights;
      for (int j = 0; j < num_blocks_; ++j) {
        Tensor term = mul_sample_bcast(aligned[j], gather_cols(weights, {j}));
        fused = j == 0 ? term : add(fused, term);
      }
    }
  }
  return output_.forward(fused);
}

Eigen::Index AimModule::parameter_count() const {
  Eigen::Index n = 0;
  for (auto& p : const_cast<AimModule&>(*this).parameters()) n += p.numel();
  return n;
}

std::vector<Tensor> AimModule::parameters() {
  std::vector<Tensor> out;
  for (auto& t : transforms_) {
    out.push_back(t.weight());
    out.push_back(t.bias());
  }
  if (variant_ != AttentionVariant::none) {
    out.push_back(attention_.weight());
    out.push_back(attention_.bias());
  }
  out.push_back(output_.weight());
  out.push_back(output_.bias());
  return out;
}

std::vector<AimModule> init_aims(const BackboneSpec& old_spec, const BackboneSpec& new_spec,
                                 AttentionVariant variant, Rng& rng) {
  if (old_spec.num_blocks != new_spec.num_blocks)
    throw InputError("init_aims: block counts differ");
  std::vector<AimModule> aims;
  for (int l = 1; l <= new_spec.num_blocks; ++l)
    aims.emplace_back(old_spec, new_spec, l, variant, rng);
  return aims;
}

Tensor aikd_loss(const std::vector<Tensor>& pyr_new, const std::vector<Tensor>& pyr_old,
                 std::vector<AimModule>& aims, DistanceKind kind, int active_count,
                 bool stop_gradient_target) {
  const int L = static_cast<int>(aims.size());
  if (static_cast<int>(pyr_new.size()) != L || static_cast<int>(pyr_old.size()) != L)
    throw InputError("aikd_loss: pyramid length does not match module count");
  if (active_count < 1 || active_count > L)
    throw InputError("aikd_loss: active_count must be in [1, " + std::to_string(L) + "]");
  // Deepest `active_count` targets stay active; shallower ones are dropped
  // first in the sweep.
  Tensor acc;
  bool first = true;
  for (int l = L - active_count; l < L; ++l) {
    Tensor target = stop_gradient_target ? detach(pyr_new[l]) : pyr_new[l];
    Tensor d = feature_map_distance(target, aims[l].forward(pyr_old), kind);
    acc = first ? d : add(acc, d);
    first = false;
  }
  return affine(acc, 1.0 / static_cast<double>(active_count), 0.0);
}

Tensor feature_distill_loss(const Tensor& f_new, const Tensor& f_old) {
  if (f_new.shape() != f_old.shape())
    throw InputError("feature_distill_loss: shape mismatch");
  Tensor cos = sum_rows(mul(l2_normalize_rows(f_new), l2_normalize_rows(f_old)));
  return mean_all(affine(cos, -1.0, 1.0));
}

}  // namespace cil
