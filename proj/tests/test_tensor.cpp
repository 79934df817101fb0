#include <doctest.h>

#include <cmath>

#include "cil/nn.hpp"
#include "cil/tensor.hpp"
#include "grad_check.hpp"

using namespace cil;
using testing::check_gradients;
using testing::rand_leaf;

namespace {
constexpr double kGradTol = 1e-5;
}

TEST_CASE("elementwise arithmetic forward values") {
  auto a = Tensor::leaf({3}, Tensor::Array::Constant(3, 2.0), false);
  auto b = Tensor::leaf({3}, Tensor::Array::Constant(3, 0.5), false);
  CHECK(add(a, b).value()[0] == doctest::Approx(2.5));
  CHECK(sub(a, b).value()[1] == doctest::Approx(1.5));
  CHECK(mul(a, b).value()[2] == doctest::Approx(1.0));
  CHECK(div(a, b).value()[0] == doctest::Approx(4.0));
  CHECK(affine(a, 3.0, 1.0).value()[0] == doctest::Approx(7.0));
  CHECK_THROWS_AS(add(a, Tensor::zeros({4})), InputError);
}

TEST_CASE("elementwise gradients") {
  Rng rng(7);
  auto a = rand_leaf({2, 5}, rng, 0.5, 2.0);
  auto b = rand_leaf({2, 5}, rng, 0.5, 2.0);
  auto c = rand_leaf({2, 5}, rng, 1.0, 3.0);
  auto res = check_gradients(
      [&] {
        Tensor t = div(mul(add(a, b), sub(a, b)), c);
        return mean_all(add(vexp(affine(t, 0.1, 0.0)), vlog(clamp(c, 0.5, 10.0))));
      },
      {a, b, c});
  CHECK(res.max_rel_error < kGradTol);
}

TEST_CASE("relu and clamp gradients away from kinks") {
  Rng rng(11);
  auto x = rand_leaf({2, 6}, rng, 0.2, 1.5);
  auto y = rand_leaf({2, 6}, rng, -1.5, -0.2);
  auto res = check_gradients(
      [&] { return mean_all(add(relu(x), relu(y))); }, {x, y});
  CHECK(res.max_rel_error < kGradTol);
}

TEST_CASE("linear layer matches manual computation and gradients") {
  Rng rng(3);
  auto x = rand_leaf({2, 3}, rng);
  auto w = rand_leaf({4, 3}, rng);
  auto b = rand_leaf({4}, rng);
  Tensor y = linear(x, w, b);
  double manual = b.value()[1];
  for (int d = 0; d < 3; ++d) manual += x.value()[d] * w.value()[3 + d];
  CHECK(y.value()[1] == doctest::Approx(manual));
  auto res = check_gradients([&] { return mean_all(mul(linear(x, w, b), linear(x, w, b))); },
                             {x, w, b});
  CHECK(res.max_rel_error < kGradTol);
}

TEST_CASE("conv2d forward against direct convolution") {
  Rng rng(5);
  auto x = rand_leaf({1, 2, 4, 4}, rng);
  auto w = rand_leaf({3, 2, 3, 3}, rng);
  auto b = rand_leaf({3}, rng);
  Tensor y = conv2d(x, w, b, 1, 1);
  REQUIRE(y.shape() == Shape({1, 3, 4, 4}));
  // direct evaluation at output (k=1, h=2, w=3)
  double acc = b.value()[1];
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        int h = 2 - 1 + i, ww = 3 - 1 + j;
        if (h < 0 || h >= 4 || ww < 0 || ww >= 4) continue;
        acc += x.value()[(c * 4 + h) * 4 + ww] * w.value()[((1 * 2 + c) * 3 + i) * 3 + j];
      }
  CHECK(y.value()[(1 * 4 + 2) * 4 + 3] == doctest::Approx(acc));
}

TEST_CASE("conv2d gradients (padded and strided)") {
  Rng rng(9);
  auto x = rand_leaf({2, 2, 5, 5}, rng);
  auto w = rand_leaf({3, 2, 3, 3}, rng);
  auto b = rand_leaf({3}, rng);
  auto res = check_gradients(
      [&] {
        Tensor y = conv2d(x, w, b, 1, 1);
        return mean_all(mul(y, y));
      },
      {x, w, b});
  CHECK(res.max_rel_error < kGradTol);

  auto w2 = rand_leaf({2, 2, 2, 2}, rng);
  auto b2 = rand_leaf({2}, rng);
  auto res2 = check_gradients(
      [&] {
        Tensor y = conv2d(x, w2, b2, 2, 0);
        return mean_all(mul(y, y));
      },
      {x, w2, b2});
  CHECK(res2.max_rel_error < kGradTol);
}

TEST_CASE("pooling ops: values and gradients") {
  Rng rng(13);
  auto x = rand_leaf({2, 3, 6, 6}, rng);

  Tensor p = avg_pool2d(x, 2);
  REQUIRE(p.shape() == Shape({2, 3, 3, 3}));
  double m = 0.0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) m += x.value()[(0 * 6 + i) * 6 + j];
  CHECK(p.value()[0] == doctest::Approx(m / 4.0));

  auto r1 = check_gradients([&] { return mean_all(mul(avg_pool2d(x, 2), avg_pool2d(x, 2))); }, {x});
  CHECK(r1.max_rel_error < kGradTol);

  auto r2 = check_gradients(
      [&] {
        Tensor y = adaptive_avg_pool(x, 4, 4);  // uneven 6 -> 4 windows
        return mean_all(mul(y, y));
      },
      {x});
  CHECK(r2.max_rel_error < kGradTol);

  auto r3 = check_gradients([&] { return mean_all(mul(global_avg_pool(x), global_avg_pool(x))); },
                            {x});
  CHECK(r3.max_rel_error < kGradTol);
}

TEST_CASE("adaptive_avg_pool to same size is identity") {
  Rng rng(17);
  auto x = rand_leaf({1, 2, 4, 4}, rng);
  Tensor y = adaptive_avg_pool(x, 4, 4);
  CHECK((y.value() - x.value()).abs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("bilinear_resize identity and gradients") {
  Rng rng(19);
  auto x = rand_leaf({1, 2, 3, 3}, rng);
  Tensor same = bilinear_resize(x, 3, 3);
  CHECK((same.value() - x.value()).abs().maxCoeff() == doctest::Approx(0.0));

  auto res = check_gradients(
      [&] {
        Tensor y = bilinear_resize(x, 7, 5);
        return mean_all(mul(y, y));
      },
      {x});
  CHECK(res.max_rel_error < kGradTol);
}

TEST_CASE("concat and slice channels round-trip with gradients") {
  Rng rng(23);
  auto a = rand_leaf({2, 2, 3, 3}, rng);
  auto b = rand_leaf({2, 3, 3, 3}, rng);
  Tensor cat = concat_channels<double>({a, b});
  REQUIRE(cat.shape() == Shape({2, 5, 3, 3}));
  Tensor back = slice_channels(cat, 2, 5);
  CHECK((back.value() - b.value()).abs().maxCoeff() == doctest::Approx(0.0));

  auto res = check_gradients(
      [&] {
        Tensor c = concat_channels<double>({a, b});
        return mean_all(mul(slice_channels(c, 1, 4), slice_channels(c, 1, 4)));
      },
      {a, b});
  CHECK(res.max_rel_error < kGradTol);
}

TEST_CASE("softmax_blocks normalizes across groups") {
  Rng rng(29);
  auto x = rand_leaf({2, 6, 3, 3}, rng, -2.0, 2.0);
  Tensor y = softmax_blocks(x, 3);  // 3 groups of 2 channels
  for (int b = 0; b < 2; ++b)
    for (int j = 0; j < 2; ++j)
      for (int p = 0; p < 9; ++p) {
        double s = 0.0;
        for (int l = 0; l < 3; ++l) s += y.value()[((b * 6 + l * 2 + j) * 9) + p];
        CHECK(s == doctest::Approx(1.0));
      }
  auto res = check_gradients(
      [&] {
        Tensor sm = softmax_blocks(x, 3);
        return mean_all(mul(sm, affine(sm, 1.0, 0.5)));
      },
      {x});
  CHECK(res.max_rel_error < kGradTol);
}

TEST_CASE("broadcast multiplies") {
  Rng rng(31);
  auto x = rand_leaf({2, 3, 4, 4}, rng);
  auto m = rand_leaf({2, 1, 4, 4}, rng);
  auto s = rand_leaf({2}, rng, 0.5, 1.5);
  Tensor y = mul_channel_bcast(x, m);
  CHECK(y.value()[(1 * 3 + 2) * 16 + 5] ==
        doctest::Approx(x.value()[(1 * 3 + 2) * 16 + 5] * m.value()[16 + 5]));
  auto res = check_gradients(
      [&] {
        Tensor t = mul_sample_bcast(mul_channel_bcast(x, m), s);
        return mean_all(mul(t, t));
      },
      {x, m, s});
  CHECK(res.max_rel_error < kGradTol);
}

TEST_CASE("row ops gradients") {
  Rng rng(37);
  auto x = rand_leaf({3, 5}, rng, 0.3, 2.0);
  auto y = rand_leaf({3, 5}, rng, -2.0, 2.0);
  auto res = check_gradients(
      [&] {
        Tensor a = l2_normalize_rows(x);
        Tensor lp = log_softmax_rows(y);
        Tensor sm = softmax_rows(y);
        Tensor g = gather_cols(y, {4, 0, 2});
        return mean_all(add(add(sum_rows(mul(a, lp)), sum_rows(mul(sm, sm))),
                            sum_rows(mul(g, g))));
      },
      {x, y});
  CHECK(res.max_rel_error < kGradTol);
}

TEST_CASE("l2_normalize_rows rejects zero rows") {
  auto z = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(l2_normalize_rows(z), NumericError);
}

TEST_CASE("squared pooled projections") {
  Rng rng(41);
  auto x = rand_leaf({2, 3, 4, 5}, rng);
  Tensor pw = sqsum_over_w(x);
  REQUIRE(pw.shape() == Shape({2, 12}));
  double acc = 0.0;
  for (int w = 0; w < 5; ++w) {
    double v = x.value()[((1 * 3 + 2) * 4 + 3) * 5 + w];
    acc += v * v;
  }
  CHECK(pw.value()[1 * 12 + 2 * 4 + 3] == doctest::Approx(acc));

  Tensor ph = sqsum_over_h(x);
  REQUIRE(ph.shape() == Shape({2, 15}));

  auto res = check_gradients(
      [&] { return mean_all(add(sum_rows(sqsum_over_w(x)), sum_rows(sqsum_over_h(x)))); }, {x});
  CHECK(res.max_rel_error < kGradTol);
}

TEST_CASE("batch norm training and eval gradients") {
  Rng rng(43);
  auto x = rand_leaf({3, 2, 3, 3}, rng);
  auto gamma = rand_leaf({2}, rng, 0.5, 1.5);
  auto beta = rand_leaf({2}, rng, -0.5, 0.5);
  nn::ArrayXd rm = nn::ArrayXd::Zero(2), rv = nn::ArrayXd::Constant(2, 1.0);

  auto train_res = check_gradients(
      [&] {
        Tensor y = nn::batch_norm2d(x, gamma, beta, rm, rv, true);
        return mean_all(mul(y, y));
      },
      {x, gamma, beta});
  CHECK(train_res.max_rel_error < kGradTol);

  // buffers now hold accumulated statistics; eval reads them as constants
  auto eval_res = check_gradients(
      [&] {
        Tensor y = nn::batch_norm2d(x, gamma, beta, rm, rv, false);
        return mean_all(mul(y, y));
      },
      {x, gamma, beta});
  CHECK(eval_res.max_rel_error < kGradTol);
}

TEST_CASE("batch norm normalizes batch statistics in training mode") {
  Rng rng(47);
  auto x = rand_leaf({4, 3, 5, 5}, rng, -3.0, 3.0);
  auto gamma = Tensor::leaf({3}, Tensor::Array::Constant(3, 1.0), false);
  auto beta = Tensor::zeros({3});
  nn::ArrayXd rm = nn::ArrayXd::Zero(3), rv = nn::ArrayXd::Constant(3, 1.0);
  Tensor y = nn::batch_norm2d(x, gamma, beta, rm, rv, true);
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int b = 0; b < 4; ++b) mean += y.value().segment((b * 3 + c) * 25, 25).sum();
    mean /= 100.0;
    for (int b = 0; b < 4; ++b)
      var += (y.value().segment((b * 3 + c) * 25, 25) - mean).square().sum();
    var /= 100.0;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("gradient accumulates when a tensor is used twice") {
  auto x = Tensor::leaf({1}, Tensor::Array::Constant(1, 3.0), true);
  Tensor y = mul(x, x);
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("detach blocks gradients") {
  auto x = Tensor::leaf({2}, Tensor::Array::Constant(2, 2.0), true);
  Tensor y = mean_all(mul(detach(x), x));
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(1.0));  // only the live factor contributes
}

TEST_CASE("float instantiation compiles and runs") {
  using TF = TensorT<float>;
  auto a = TF::leaf({2}, TF::Array::Constant(2, 1.5f), false);
  auto b = TF::leaf({2}, TF::Array::Constant(2, 0.5f), false);
  CHECK(add(a, b).value()[1] == doctest::Approx(2.0f));
}
