#pragma once

// Trainable layers on top of the autodiff tensor, plus momentum SGD.
// Layers are plain value types; deep copies clone parameters, so a frozen
// snapshot of a network shares nothing with the live one.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cil/rng.hpp"
#include "cil/tensor.hpp"

namespace cil::nn {

using ArrayXd = Eigen::ArrayXd;

inline Tensor init_normal(Shape shape, double stddev, Rng& rng, bool requires_grad = true) {
  Tensor::Array v(shape_numel(shape));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal(0.0, stddev);
  return Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

inline Tensor init_zeros(Shape shape, bool requires_grad = true) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

// Deep copy of a leaf parameter (fresh node, same values).
inline Tensor clone_leaf(const Tensor& t) {
  return Tensor::leaf(t.shape(), t.value(), t.requires_grad());
}

struct NamedParam {
  std::string name;
  Tensor tensor;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng)
      : stride_(stride), pad_(pad) {
    const double stddev = std::sqrt(2.0 / (in_ch * kernel * kernel));
    w_ = init_normal({out_ch, in_ch, kernel, kernel}, stddev, rng);
    b_ = init_zeros({out_ch});
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, w_, b_, stride_, pad_); }

  Tensor& weight() { return w_; }
  Tensor& bias() { return b_; }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", w_});
    out.push_back({prefix + ".bias", b_});
  }

  Conv2d cloned() const {
    Conv2d c;
    c.w_ = clone_leaf(w_);
    c.b_ = clone_leaf(b_);
    c.stride_ = stride_;
    c.pad_ = pad_;
    return c;
  }

 private:
  Tensor w_, b_;
  int stride_ = 1, pad_ = 0;
};

// Free-function batch norm so losses built on it stay gradient-checkable.
// Training mode normalizes with batch statistics and updates the running
// buffers in place; eval mode is an affine map through the running buffers.
inline Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           ArrayXd& running_mean, ArrayXd& running_var, bool training,
                           double momentum = 0.1, double eps = 1e-5) {
  if (x.rank() != 4) throw InputError("batch_norm2d: expected rank-4 input");
  const Eigen::Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.size() != C ||
      running_var.size() != C)
    throw InputError("batch_norm2d: per-channel parameter size mismatch");
  const Eigen::Index N = B * HW;
  Tensor::Array y(x.numel());
  const auto& xv = x.value();

  if (training) {
    ArrayXd mean(C), invstd(C);
    Tensor::Array xhat(x.numel());
    for (Eigen::Index c = 0; c < C; ++c) {
      double m = 0.0;
      for (Eigen::Index b = 0; b < B; ++b) m += xv.segment((b * C + c) * HW, HW).sum();
      m /= static_cast<double>(N);
      double var = 0.0;
      for (Eigen::Index b = 0; b < B; ++b)
        var += (xv.segment((b * C + c) * HW, HW) - m).square().sum();
      var /= static_cast<double>(N);
      mean[c] = m;
      invstd[c] = 1.0 / std::sqrt(var + eps);
      for (Eigen::Index b = 0; b < B; ++b) {
        auto seg = ((xv.segment((b * C + c) * HW, HW) - m) * invstd[c]).eval();
        xhat.segment((b * C + c) * HW, HW) = seg;
        y.segment((b * C + c) * HW, HW) = seg * gamma.value()[c] + beta.value()[c];
      }
      const double unbiased = (N > 1) ? var * static_cast<double>(N) / static_cast<double>(N - 1)
                                      : var;
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * m;
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    }
    return Tensor::make(
        x.shape(), std::move(y), {x, gamma, beta},
        [x, gamma, beta, xhat, invstd, B, C, HW, N](Tensor::Node& n) mutable {
          for (Eigen::Index c = 0; c < C; ++c) {
            double sum_g = 0.0, sum_gx = 0.0, sum_raw = 0.0;
            for (Eigen::Index b = 0; b < B; ++b) {
              auto g = n.grad.segment((b * C + c) * HW, HW);
              auto xh = xhat.segment((b * C + c) * HW, HW);
              sum_raw += g.sum();
              sum_g += (g * gamma.value()[c]).sum();
              sum_gx += (g * gamma.value()[c] * xh).sum();
            }
            if (x.requires_grad()) {
              auto& gx = x.node()->ensure_grad();
              for (Eigen::Index b = 0; b < B; ++b) {
                auto g = n.grad.segment((b * C + c) * HW, HW);
                auto xh = xhat.segment((b * C + c) * HW, HW);
                gx.segment((b * C + c) * HW, HW) +=
                    invstd[c] * (g * gamma.value()[c] -
                                 (sum_g + xh * sum_gx) / static_cast<double>(N));
              }
            }
            if (gamma.requires_grad()) {
              double dg = 0.0;
              for (Eigen::Index b = 0; b < B; ++b)
                dg += (n.grad.segment((b * C + c) * HW, HW) * xhat.segment((b * C + c) * HW, HW))
                          .sum();
              gamma.node()->ensure_grad()[c] += dg;
            }
            if (beta.requires_grad()) beta.node()->ensure_grad()[c] += sum_raw;
          }
        });
  }

  // Eval path: snapshot the buffers so later updates cannot leak into backward.
  ArrayXd rm = running_mean;
  ArrayXd rinvstd = (running_var + eps).sqrt().inverse();
  for (Eigen::Index c = 0; c < C; ++c)
    for (Eigen::Index b = 0; b < B; ++b)
      y.segment((b * C + c) * HW, HW) =
          (xv.segment((b * C + c) * HW, HW) - rm[c]) * rinvstd[c] * gamma.value()[c] +
          beta.value()[c];
  return Tensor::make(
      x.shape(), std::move(y), {x, gamma, beta},
      [x, gamma, beta, rm, rinvstd, B, C, HW](Tensor::Node& n) mutable {
        for (Eigen::Index c = 0; c < C; ++c) {
          double dg = 0.0, db = 0.0;
          for (Eigen::Index b = 0; b < B; ++b) {
            auto g = n.grad.segment((b * C + c) * HW, HW);
            if (x.requires_grad())
              x.node()->ensure_grad().segment((b * C + c) * HW, HW) +=
                  g * gamma.value()[c] * rinvstd[c];
            dg += (g * (x.value().segment((b * C + c) * HW, HW) - rm[c]) * rinvstd[c]).sum();
            db += g.sum();
          }
          if (gamma.requires_grad()) gamma.node()->ensure_grad()[c] += dg;
          if (beta.requires_grad()) beta.node()->ensure_grad()[c] += db;
        }
      });
}

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels) {
    gamma_ = Tensor::leaf({channels}, Tensor::Array::Constant(channels, 1.0), true);
    beta_ = init_zeros({channels});
    running_mean_ = ArrayXd::Zero(channels);
    running_var_ = ArrayXd::Constant(channels, 1.0);
  }

  Tensor forward(const Tensor& x, bool training) {
    return batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, training, momentum_, eps_);
  }

  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  ArrayXd& running_mean() { return running_mean_; }
  ArrayXd& running_var() { return running_var_; }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".gamma", gamma_});
    out.push_back({prefix + ".beta", beta_});
  }

  void collect_buffers(const std::string& prefix, std::map<std::string, ArrayXd*>& out) {
    out[prefix + ".running_mean"] = &running_mean_;
    out[prefix + ".running_var"] = &running_var_;
  }

  BatchNorm2d cloned() const {
    BatchNorm2d c;
    c.gamma_ = clone_leaf(gamma_);
    c.beta_ = clone_leaf(beta_);
    c.running_mean_ = running_mean_;
    c.running_var_ = running_var_;
    c.momentum_ = momentum_;
    c.eps_ = eps_;
    return c;
  }

 private:
  Tensor gamma_, beta_;
  ArrayXd running_mean_, running_var_;
  double momentum_ = 0.1, eps_ = 1e-5;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_dim, int out_dim, double init_stddev, Rng& rng) {
    w_ = init_normal({out_dim, in_dim}, init_stddev, rng);
    b_ = init_zeros({out_dim});
  }

  Tensor forward(const Tensor& x) const { return linear(x, w_, b_); }

  Tensor& weight() { return w_; }
  Tensor& bias() { return b_; }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", w_});
    out.push_back({prefix + ".bias", b_});
  }

  Linear cloned() const {
    Linear c;
    c.w_ = clone_leaf(w_);
    c.b_ = clone_leaf(b_);
    return c;
  }

 private:
  Tensor w_, b_;
};

// Momentum SGD with L2 weight decay folded into the gradient.
class SGD {
 public:
  SGD(std::vector<Tensor> params, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    for (auto& p : params) slots_.push_back({p, Tensor::Array::Zero(p.numel())});
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  void step(double lr) {
    for (auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      Tensor::Array g = s.param.grad() + weight_decay_ * s.param.value();
      s.velocity = momentum_ * s.velocity + g;
      s.param.value() -= lr * s.velocity;
    }
  }

  size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor param;
    Tensor::Array velocity;
  };
  std::vector<Slot> slots_;
  double momentum_, weight_decay_;
};

}  // namespace cil::nn
