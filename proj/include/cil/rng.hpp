#pragma once

#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cil/error.hpp"

namespace cil {

// Seeded engine with value-semantics state save/restore, so a resumed run
// replays the exact sampling sequence of an uninterrupted one.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  std::mt19937_64& engine() { return gen_; }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }

  // Inclusive range [lo, hi].
  int64_t randint(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
  }

  // Symmetric Beta(alpha, alpha) on [0, 1].
  double beta_symmetric(double alpha) {
    if (alpha <= 0.0) throw InputError("beta_symmetric: alpha must be positive");
    if (alpha == 1.0) return uniform();
    std::gamma_distribution<double> g(alpha, 1.0);
    const double a = g(gen_);
    const double b = g(gen_);
    return (a + b > 0.0) ? a / (a + b) : 0.5;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(randint(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void restore_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (is.fail()) throw IoError("Rng: malformed engine state");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace cil
