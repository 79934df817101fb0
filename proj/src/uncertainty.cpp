#include "cil/uncertainty.hpp"

#include <cmath>

namespace cil {

DivergenceKind parse_divergence_kind(const std::string& s) {
  if (s == "kl") return DivergenceKind::kl;
  if (s == "cross_entropy") return DivergenceKind::cross_entropy;
  throw ConfigError("unknown uncertainty.kind '" + s + "' (expected kl|cross_entropy)");
}

std::string to_string(DivergenceKind k) {
  return k == DivergenceKind::kl ? "kl" : "cross_entropy";
}

Tensor logit_divergence(const Logits& g_old, const Logits& g_new_restricted, DivergenceKind kind,
                        double temperature) {
  if (g_old.class_ids != g_new_restricted.class_ids)
    throw InputError("logit_divergence: class id sets are not aligned");
  if (g_old.values.shape() != g_new_restricted.values.shape())
    throw InputError("logit_divergence: logit shapes differ");
  if (temperature <= 0.0) throw InputError("logit_divergence: temperature must be positive");
  const Eigen::Index B = g_old.values.dim(0), K = g_old.values.dim(1);

  // Old distribution is data, not graph: max-shifted softmax of g_old / T.
  Tensor::Array p_old(B * K);
  Tensor::Array self_entropy_term(B);
  for (Eigen::Index i = 0; i < B; ++i) {
    auto row = (g_old.values.value().segment(i * K, K) / temperature).eval();
    Tensor::Array e = (row - row.maxCoeff()).exp();
    Tensor::Array p = e / e.sum();
    p_old.segment(i * K, K) = p;
    double h = 0.0;
    for (Eigen::Index j = 0; j < K; ++j)
      if (p[j] > 0.0) h += p[j] * std::log(p[j]);
    self_entropy_term[i] = h;  // sum p log p (negative entropy)
  }
  Tensor p_old_t = Tensor::leaf({B, K}, std::move(p_old), false);
  Tensor logp_new = log_softmax_rows(affine(g_new_restricted.values, 1.0 / temperature, 0.0));
  Tensor cross = neg(sum_rows(mul(p_old_t, logp_new)));  // H(p_old, p_new), per sample
  if (kind == DivergenceKind::cross_entropy) return cross;
  // KL = sum p_old log p_old + H(p_old, p_new)
  return add(Tensor::leaf({B}, std::move(self_entropy_term), false), cross);
}

Tensor prediction_uncertainty(const Logits& g_old, const Logits& g_new_restricted,
                              DivergenceKind kind, double temperature) {
  Tensor d = logit_divergence(g_old, g_new_restricted, kind, temperature);
  return clamp(vexp(d), 1e-6, 1e6);
}

Tensor cross_entropy_per_sample(const Tensor& logits, const Tensor& soft_targets) {
  if (logits.shape() != soft_targets.shape())
    throw InputError("cross_entropy_per_sample: target shape mismatch");
  Tensor targets = detach(soft_targets);
  return neg(sum_rows(mul(log_softmax_rows(logits), targets)));
}

Tensor uncertainty_regularized_loss(const Tensor& ce_per_sample, const Tensor& u_per_sample) {
  if (ce_per_sample.numel() != u_per_sample.numel())
    throw InputError("uncertainty_regularized_loss: per-sample vectors differ in length");
  if ((u_per_sample.value() <= 0.0).any())
    throw NumericError("uncertainty_regularized_loss: non-positive uncertainty");
  return mean_all(add(div(ce_per_sample, u_per_sample), vlog(u_per_sample)));
}

}  // namespace cil
