#pragma once

// Old-knowledge prediction uncertainty and the regularized classification
// loss built on it. The divergence compares the old head's distribution with
// the new head restricted to the old classes; its exponential down-weights
// the classification term where the two heads disagree.

#include <vector>

#include "cil/model.hpp"
#include "cil/tensor.hpp"

namespace cil {

enum class DivergenceKind { kl, cross_entropy };

DivergenceKind parse_divergence_kind(const std::string& s);
std::string to_string(DivergenceKind k);

// Per-sample divergence D(softmax(g_old/T), softmax(g_new/T)) as a [B]
// tensor. The old logits enter as constants; gradients reach g_new only.
// Both arguments must carry the same class ids in the same order.
Tensor logit_divergence(const Logits& g_old, const Logits& g_new_restricted, DivergenceKind kind,
                        double temperature = 1.0);

// u = exp(D), clamped to [1e-6, 1e6] before any division.
Tensor prediction_uncertainty(const Logits& g_old, const Logits& g_new_restricted,
                              DivergenceKind kind, double temperature = 1.0);

// Per-sample cross-entropy of logits against a (possibly soft) target
// distribution; targets enter as constants.
Tensor cross_entropy_per_sample(const Tensor& logits, const Tensor& soft_targets);

// mean over the batch of ce/u + log u.
Tensor uncertainty_regularized_loss(const Tensor& ce_per_sample, const Tensor& u_per_sample);

}  // namespace cil
