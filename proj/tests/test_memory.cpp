#include <doctest.h>

#include <limits>
#include <vector>

#include "cil/memory.hpp"
#include "cil/rng.hpp"

using namespace cil;

namespace {

// Exhaustive greedy oracle: recomputes the candidate mean from scratch at
// every step, no running sums.
std::vector<Eigen::Index> herding_oracle(const Eigen::MatrixXd& f, int m) {
  const Eigen::Index n = f.rows();
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(f.cols());
  for (Eigen::Index i = 0; i < n; ++i) mu += f.row(i).transpose();
  mu /= static_cast<double>(n);
  std::vector<Eigen::Index> sel;
  std::vector<char> used(n, 0);
  for (int k = 0; k < m; ++k) {
    Eigen::Index best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (used[i]) continue;
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(f.cols());
      for (auto j : sel) mean += f.row(j).transpose();
      mean += f.row(i).transpose();
      mean /= static_cast<double>(k + 1);
      const double d = (mu - mean).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    used[best] = 1;
    sel.push_back(best);
  }
  return sel;
}

std::vector<float> const_image(Eigen::Index size, float v) {
  return std::vector<float>(size, v);
}

}  // namespace

TEST_CASE("herding trivial and tie-break cases") {
  Eigen::MatrixXd one(1, 3);
  one << 0.5, -0.25, 1.0;
  CHECK(herding_select(one, 1) == std::vector<Eigen::Index>{0});

  Eigen::MatrixXd same = Eigen::MatrixXd::Constant(5, 2, 0.7);
  CHECK(herding_select(same, 3) == std::vector<Eigen::Index>({0, 1, 2}));

  Eigen::MatrixXd f(4, 2);
  f << 1, 0, 0, 1, -1, 0, 0, -1;
  CHECK(herding_select(f, 2) == herding_oracle(f, 2));

  CHECK_THROWS_AS(herding_select(f, 5), InputError);
  CHECK_THROWS_AS(herding_select(f, 0), InputError);
  Eigen::MatrixXd bad(1, 1);
  bad << std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(herding_select(bad, 1), InputError);
}

TEST_CASE("herding matches the exhaustive greedy oracle on 200 random instances") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.randint(0, 11));
    const int d = 1 + static_cast<int>(rng.randint(0, 4));
    const int m = 1 + static_cast<int>(rng.randint(0, n - 1));
    Eigen::MatrixXd f(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) f(i, j) = rng.normal();
    REQUIRE(herding_select(f, m) == herding_oracle(f, m));
  }
}

TEST_CASE("fixed-budget quotas and prefix truncation") {
  const int chw = 3 * 2 * 2;
  ExemplarMemory mem(MemoryPolicy{MemoryPolicy::Kind::fixed_total, 8, 0}, 3, 2, 2);

  Rng rng(7);
  auto make_class = [&](int id, int n) {
    CandidateSet cs;
    cs.class_id = id;
    cs.features.resize(n, 2);
    for (int i = 0; i < n; ++i) {
      cs.features(i, 0) = rng.normal();
      cs.features(i, 1) = rng.normal();
    }
    return cs;
  };

  std::vector<std::vector<float>> imgs;
  for (int i = 0; i < 64; ++i) imgs.push_back(const_image(chw, static_cast<float>(i)));
  size_t cursor = 0;
  auto with_images = [&](CandidateSet cs) {
    for (Eigen::Index i = 0; i < cs.features.rows(); ++i) cs.images.push_back(imgs[cursor++].data());
    return cs;
  };

  // two classes: quota 4 each
  mem.update({with_images(make_class(0, 6)), with_images(make_class(1, 6))}, {0, 1});
  CHECK(mem.total_count() == 8);
  CHECK(mem.class_count(0) == 4);
  CHECK(mem.class_count(1) == 4);

  // copy of class 0's first exemplars before shrink
  auto before = mem.stored()[0].images;

  // four classes: quota drops to 2, existing lists keep their prefix
  mem.update({with_images(make_class(2, 6)), with_images(make_class(3, 6))}, {0, 1, 2, 3});
  CHECK(mem.total_count() == 8);
  for (int id : {0, 1, 2, 3}) CHECK(mem.class_count(id) == 2);
  for (int i = 0; i < 2 * chw; ++i) REQUIRE(mem.stored()[0].images[i] == before[i]);

  // budget can no longer cover 9 classes
  std::vector<CandidateSet> five;
  for (int id = 4; id < 9; ++id) five.push_back(with_images(make_class(id, 3)));
  CHECK_THROWS_AS(mem.update(five, {0, 1, 2, 3, 4, 5, 6, 7, 8}), ConfigError);
}

TEST_CASE("per-class policy adds exactly m per new class and leaves old classes alone") {
  const int chw = 3 * 2 * 2;
  ExemplarMemory mem(MemoryPolicy{MemoryPolicy::Kind::per_class, 0, 2}, 3, 2, 2);
  Rng rng(17);
  std::vector<std::vector<float>> imgs;
  for (int i = 0; i < 40; ++i) imgs.push_back(const_image(chw, static_cast<float>(i)));
  size_t cursor = 0;
  auto make_class = [&](int id, int n) {
    CandidateSet cs;
    cs.class_id = id;
    cs.features.resize(n, 3);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 3; ++j) cs.features(i, j) = rng.normal();
    for (int i = 0; i < n; ++i) cs.images.push_back(imgs[cursor++].data());
    return cs;
  };
  mem.update({make_class(0, 5), make_class(1, 5)}, {0, 1});
  CHECK(mem.total_count() == 4);
  auto frozen = mem.stored()[0].images;
  mem.update({make_class(2, 5)}, {0, 1, 2});
  CHECK(mem.total_count() == 6);
  CHECK(mem.stored()[0].images == frozen);

  // duplicate class rejected, overlap with learned-set enforced
  CHECK_THROWS_AS(mem.update({make_class(2, 5)}, {0, 1, 2}), StateError);
}

TEST_CASE("budget invariant across a growing class count") {
  // B = 2000 over 2..10 classes: quota follows floor(B/classes) at every step
  const int chw = 3;
  ExemplarMemory mem(MemoryPolicy{MemoryPolicy::Kind::fixed_total, 2000, 0}, 3, 1, 1);
  Rng rng(23);
  std::vector<std::vector<float>> imgs;
  for (int i = 0; i < 10 * 1200; ++i) imgs.push_back(const_image(chw, static_cast<float>(i)));
  size_t cursor = 0;
  std::vector<int> learned;
  for (int id = 0; id < 10; ++id) {
    CandidateSet cs;
    cs.class_id = id;
    const int n = 1100;
    cs.features.resize(n, 2);
    for (int i = 0; i < n; ++i) {
      cs.features(i, 0) = rng.normal();
      cs.features(i, 1) = rng.normal();
    }
    for (int i = 0; i < n; ++i) cs.images.push_back(imgs[cursor++].data());
    learned.push_back(id);
    if (learned.size() < 2) continue;  // first update adds classes {0,1} together
    if (learned.size() == 2) {
      CandidateSet cs0 = cs;
      cs0.class_id = 0;
      mem.update({cs0, cs}, learned);
    } else {
      mem.update({cs}, learned);
    }
    const int classes = static_cast<int>(learned.size());
    const Eigen::Index quota = 2000 / classes;
    CHECK(mem.total_count() <= 2000);
    for (int c : learned) CHECK(mem.class_count(c) == quota);
  }
}
