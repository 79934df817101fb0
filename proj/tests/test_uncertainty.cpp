#include <doctest.h>

#include <cmath>

#include "cil/uncertainty.hpp"
#include "grad_check.hpp"

using namespace cil;
using testing::check_gradients;
using testing::rand_leaf;

namespace {
Logits make_logits(std::vector<double> vals, Eigen::Index rows, std::vector<int> ids,
                   bool requires_grad = false) {
  Tensor::Array v(static_cast<Eigen::Index>(vals.size()));
  for (size_t i = 0; i < vals.size(); ++i) v[i] = vals[i];
  return {Tensor::leaf({rows, static_cast<Eigen::Index>(ids.size())}, std::move(v), requires_grad),
          std::move(ids)};
}
}  // namespace

TEST_CASE("kl divergence: identity, hand value, shift invariance") {
  Logits same = make_logits({0.3, -0.7, 1.1, 0.3, -0.7, 1.1}, 2, {0, 1, 2});
  Tensor d0 = logit_divergence(same, same, DivergenceKind::kl);
  CHECK(d0.value().abs().maxCoeff() == doctest::Approx(0.0));

  // g_old = (0, ln 3) -> p_old = (0.25, 0.75); g_new = (0, 0) -> (0.5, 0.5)
  Logits g_old = make_logits({0.0, std::log(3.0)}, 1, {4, 9});
  Logits g_new = make_logits({0.0, 0.0}, 1, {4, 9});
  const double expect = 0.25 * std::log(0.5) + 0.75 * std::log(1.5);
  CHECK(logit_divergence(g_old, g_new, DivergenceKind::kl).value()[0] ==
        doctest::Approx(expect));

  // adding a constant to either argument's logits changes nothing
  Logits g_old_shift = make_logits({5.0, 5.0 + std::log(3.0)}, 1, {4, 9});
  Logits g_new_shift = make_logits({-2.0, -2.0}, 1, {4, 9});
  CHECK(logit_divergence(g_old_shift, g_new, DivergenceKind::kl).value()[0] ==
        doctest::Approx(expect));
  CHECK(logit_divergence(g_old, g_new_shift, DivergenceKind::kl).value()[0] ==
        doctest::Approx(expect));

  Logits misaligned = make_logits({0.0, 0.0}, 1, {4, 8});
  CHECK_THROWS_AS(logit_divergence(g_old, misaligned, DivergenceKind::kl), InputError);
}

TEST_CASE("cross-entropy divergence sits above the entropy floor") {
  Rng rng(11);
  Logits g_old = {rand_leaf({3, 4}, rng, -2, 2, false), {0, 1, 2, 3}};
  Logits g_new = {rand_leaf({3, 4}, rng, -2, 2, false), {0, 1, 2, 3}};
  Tensor h = logit_divergence(g_old, g_new, DivergenceKind::cross_entropy);
  Tensor kl = logit_divergence(g_old, g_new, DivergenceKind::kl);
  // H(p, q) = H(p) + KL(p||q), so H - KL must be the (non-negative) entropy
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(h.value()[i] >= kl.value()[i]);
    CHECK(kl.value()[i] >= -1e-12);
  }
}

TEST_CASE("prediction uncertainty is exp of the divergence") {
  Logits g_old = make_logits({0.0, std::log(3.0)}, 1, {0, 1});
  Logits g_same = make_logits({0.0, std::log(3.0)}, 1, {0, 1});
  CHECK(prediction_uncertainty(g_old, g_same, DivergenceKind::kl).value()[0] ==
        doctest::Approx(1.0));

  Logits g_new = make_logits({0.0, 0.0}, 1, {0, 1});
  Tensor d = logit_divergence(g_old, g_new, DivergenceKind::kl);
  Tensor u = prediction_uncertainty(g_old, g_new, DivergenceKind::kl);
  CHECK(u.value()[0] == doctest::Approx(std::exp(d.value()[0])));
  CHECK(u.value()[0] >= 1.0);  // KL >= 0

  // monotone: widening the disagreement raises u
  Logits worse = make_logits({3.0, -3.0}, 1, {0, 1});
  CHECK(prediction_uncertainty(g_old, worse, DivergenceKind::kl).value()[0] > u.value()[0]);
}

TEST_CASE("uncertainty-regularized loss values") {
  // u = 1 everywhere reduces to the plain mean cross-entropy
  Tensor ce = Tensor::leaf({3}, [] {
    Tensor::Array v(3);
    v << 0.2, 0.9, 1.7;
    return v;
  }(), false);
  Tensor ones = Tensor::leaf({3}, Tensor::Array::Constant(3, 1.0), false);
  CHECK(uncertainty_regularized_loss(ce, ones).item() ==
        doctest::Approx(ce.value().mean()));

  // ce = ln 2, u = 2 -> ln2/2 + ln2
  Tensor ce2 = Tensor::leaf({1}, Tensor::Array::Constant(1, std::log(2.0)), false);
  Tensor u2 = Tensor::leaf({1}, Tensor::Array::Constant(1, 2.0), false);
  CHECK(uncertainty_regularized_loss(ce2, u2).item() ==
        doctest::Approx(std::log(2.0) / 2.0 + std::log(2.0)));

  Tensor bad_u = Tensor::leaf({1}, Tensor::Array::Constant(1, -0.5), false);
  CHECK_THROWS_AS(uncertainty_regularized_loss(ce2, bad_u), NumericError);
}

TEST_CASE("classification gradient is damped by exactly 1/u") {
  Rng rng(13);
  Tensor ce = rand_leaf({4}, rng, 0.1, 2.0, true);
  Logits g_old = {rand_leaf({4, 3}, rng, -1, 1, false), {0, 1, 2}};
  Logits g_new = {rand_leaf({4, 3}, rng, -1, 1, false), {0, 1, 2}};
  Tensor u = prediction_uncertainty(g_old, g_new, DivergenceKind::kl);
  Tensor loss = uncertainty_regularized_loss(ce, u);
  loss.backward();
  for (Eigen::Index i = 0; i < 4; ++i) {
    const double expected = 1.0 / (4.0 * u.value()[i]);  // mean over 4 samples
    CHECK(ce.grad()[i] == doctest::Approx(expected));
    CHECK(ce.grad()[i] > 0.0);
    CHECK(ce.grad()[i] <= 0.25 + 1e-12);  // 1/u <= 1 for KL
  }
}

TEST_CASE("full uncertainty path gradients vs finite differences") {
  Rng rng(17);
  Tensor new_logits = rand_leaf({2, 5}, rng, -1.0, 1.0, true);
  Tensor old_vals = rand_leaf({2, 3}, rng, -1.0, 1.0, false);
  Tensor targets = rand_leaf({2, 5}, rng, 0.0, 1.0, false);
  // normalize targets to a distribution
  for (int i = 0; i < 2; ++i) {
    double s = targets.value().segment(i * 5, 5).sum();
    targets.value().segment(i * 5, 5) /= s;
  }
  auto build = [&] {
    Logits lg_new{new_logits, {0, 1, 2, 3, 4}};
    Logits lg_old{old_vals, {0, 2, 4}};
    Logits restricted = lg_new.restricted_to(lg_old.class_ids);
    Tensor ce = cross_entropy_per_sample(new_logits, targets);
    Tensor u = prediction_uncertainty(lg_old, restricted, DivergenceKind::kl, 2.0);
    return uncertainty_regularized_loss(ce, u);
  };
  auto res = check_gradients(build, {new_logits});
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("temperature scaling changes the divergence as specified") {
  Logits g_old = make_logits({0.0, std::log(3.0)}, 1, {0, 1});
  Logits g_new = make_logits({0.0, 0.0}, 1, {0, 1});
  // at T=2 the old distribution softens to softmax(0, ln3/2)
  const double z = std::exp(0.5 * std::log(3.0));
  const double p1 = z / (1.0 + z);
  const double expect = (1.0 - p1) * std::log((1.0 - p1) / 0.5) + p1 * std::log(p1 / 0.5);
  CHECK(logit_divergence(g_old, g_new, DivergenceKind::kl, 2.0).value()[0] ==
        doctest::Approx(expect));
  CHECK_THROWS_AS(logit_divergence(g_old, g_new, DivergenceKind::kl, 0.0), InputError);
}
