#pragma once

// Distillation machinery: feature-map distances, plain block-to-block
// distillation, and the adaptive integration modules that fuse the whole old
// feature pyramid into a target matching one block of the new network.

#include <string>
#include <vector>

#include "cil/model.hpp"
#include "cil/nn.hpp"
#include "cil/tensor.hpp"

namespace cil {

enum class DistanceKind { pod, mse };
enum class AttentionVariant { block_wise_maps, channel_wise_maps, block_wise_weights, none };

DistanceKind parse_distance_kind(const std::string& s);
AttentionVariant parse_attention_variant(const std::string& s);
std::string to_string(DistanceKind k);
std::string to_string(AttentionVariant v);

// Width/height-pooled squared activations, flattened, L2-normalized per
// sample, compared in squared Euclidean norm; symmetric and zero on equal
// maps. Throws NumericError if a pooled vector has zero norm.
Tensor pod_distance(const Tensor& fa, const Tensor& fb);

Tensor mse_distance(const Tensor& fa, const Tensor& fb);

Tensor feature_map_distance(const Tensor& fa, const Tensor& fb, DistanceKind kind);

// Mean per-block distance between two pyramids of equal layout; the
// layer-to-layer baseline the integrated variant is compared against.
Tensor block_distill_loss(const std::vector<Tensor>& pyr_new, const std::vector<Tensor>& pyr_old,
                          DistanceKind kind);

// One integration module targeting block `target_block` (1-based): per-source
// 1x1 transforms, spatial alignment, attention-weighted fusion across blocks,
// and a 3x3 output convolution producing the target block's shape.
class AimModule {
 public:
  AimModule() = default;
  AimModule(const BackboneSpec& old_spec, const BackboneSpec& new_spec, int target_block,
            AttentionVariant variant, Rng& rng);

  // When given, `attention_out` receives the normalized attention tensor:
  // [B, L, h, w] for block-wise maps, [B, L*c, h, w] for channel-wise maps,
  // [B, L] for block-wise weights; left untouched for variant none.
  Tensor forward(const std::vector<Tensor>& old_pyramid, Tensor* attention_out = nullptr) const;

  int target_block() const { return target_block_; }
  AttentionVariant variant() const { return variant_; }
  Eigen::Index parameter_count() const;
  std::vector<Tensor> parameters();

 private:
  std::vector<nn::Conv2d> transforms_;
  nn::Conv2d attention_;
  nn::Conv2d output_;
  int target_block_ = 0;
  int num_blocks_ = 0;
  int target_channels_ = 0;
  int target_size_ = 0;
  AttentionVariant variant_ = AttentionVariant::block_wise_maps;
};

// Fresh modules for one round, one per target block.
std::vector<AimModule> init_aims(const BackboneSpec& old_spec, const BackboneSpec& new_spec,
                                 AttentionVariant variant, Rng& rng);

// Mean distance between the deepest `active_count` new-model blocks and their
// integration-module reconstructions. Gradients reach the new pyramid (unless
// stop_gradient_target) and the module parameters; the old pyramid enters as
// data only.
Tensor aikd_loss(const std::vector<Tensor>& pyr_new, const std::vector<Tensor>& pyr_old,
                 std::vector<AimModule>& aims, DistanceKind kind, int active_count,
                 bool stop_gradient_target = false);

// Mean over the batch of 1 - cos(old embedding, new embedding).
Tensor feature_distill_loss(const Tensor& f_new, const Tensor& f_old);

}  // namespace cil
