#pragma once

// Reverse-mode autodiff over dense Eigen arrays. A TensorT is a shared handle
// to a graph node; ops are free functions that record a backward closure when
// any input requires gradients. Layouts are row-major: rank-4 tensors are
// [batch, channel, height, width], rank-2 are [rows, cols].

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "cil/error.hpp"

namespace cil {

using Shape = std::vector<Eigen::Index>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline Eigen::Index shape_numel(const Shape& s) {
  Eigen::Index n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <typename S>
class TensorT {
 public:
  using Scalar = S;
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
  using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

  struct Node {
    Array value;
    Array grad;  // empty until first accumulation
    Shape shape;
    bool requires_grad = false;
    std::vector<TensorT> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Array& g) {
      if (grad.size() == 0) grad = Array::Zero(value.size());
      grad += g;
    }
    Array& ensure_grad() {
      if (grad.size() == 0) grad = Array::Zero(value.size());
      return grad;
    }
  };

  TensorT() = default;

  static TensorT leaf(Shape shape, Array value, bool requires_grad) {
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(value);
    if (t.n_->value.size() != shape_numel(t.n_->shape))
      throw InputError("tensor data size does not match shape " + shape_str(t.n_->shape));
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return leaf(shape, Array::Zero(shape_numel(shape)), requires_grad);
  }

  static TensorT scalar(S v) { return leaf({}, Array::Constant(1, v), false); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  Eigen::Index dim(size_t i) const { return n_->shape.at(i); }
  size_t rank() const { return n_->shape.size(); }
  Eigen::Index numel() const { return n_->value.size(); }
  bool requires_grad() const { return n_->requires_grad; }

  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  Array& value() { return n_->value; }
  const Array& value() const { return n_->value; }
  const Array& grad() const { return n_->grad; }
  bool has_grad() const { return n_->grad.size() != 0; }

  S item() const {
    if (numel() != 1) throw InputError("item() on tensor of size " + std::to_string(numel()));
    return n_->value[0];
  }

  void zero_grad() { n_->grad.resize(0); }

  std::shared_ptr<Node> node() const { return n_; }

  // Backward from a scalar root: topological sort over the recorded graph,
  // then closures push gradients toward the leaves.
  void backward() const {
    if (numel() != 1) throw InputError("backward() requires a scalar root");
    if (!n_->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{n_.get(), 0}};
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx++].n_.get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
    }
  }

  static TensorT make(Shape shape, Array value, std::vector<TensorT> parents,
                      std::function<void(Node&)> backward_fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(value);
    t.n_->requires_grad = rg;
    if (rg) {
      t.n_->parents = std::move(parents);
      t.n_->backward_fn = std::move(backward_fn);
    }
    return t;
  }

 private:
  std::shared_ptr<Node> n_;
};

using Tensor = TensorT<double>;

namespace detail {

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw InputError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename S>
void require_rank(const TensorT<S>& t, size_t r, const char* op) {
  if (t.rank() != r)
    throw InputError(std::string(op) + ": expected rank-" + std::to_string(r) + " tensor, got " +
                     shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "add");
  return TensorT<S>::make(
      a.shape(), a.value() + b.value(), {a, b}, [a, b](typename TensorT<S>::Node& n) mutable {
        if (a.requires_grad()) a.node()->accumulate(n.grad);
        if (b.requires_grad()) b.node()->accumulate(n.grad);
      });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "sub");
  return TensorT<S>::make(
      a.shape(), a.value() - b.value(), {a, b}, [a, b](typename TensorT<S>::Node& n) mutable {
        if (a.requires_grad()) a.node()->accumulate(n.grad);
        if (b.requires_grad()) b.node()->accumulate(-n.grad);
      });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "mul");
  return TensorT<S>::make(
      a.shape(), a.value() * b.value(), {a, b}, [a, b](typename TensorT<S>::Node& n) mutable {
        if (a.requires_grad()) a.node()->accumulate(n.grad * b.value());
        if (b.requires_grad()) b.node()->accumulate(n.grad * a.value());
      });
}

template <typename S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "div");
  if ((b.value().abs() == S(0)).any()) throw NumericError("div: zero denominator");
  return TensorT<S>::make(
      a.shape(), a.value() / b.value(), {a, b}, [a, b](typename TensorT<S>::Node& n) mutable {
        if (a.requires_grad()) a.node()->accumulate(n.grad / b.value());
        if (b.requires_grad())
          b.node()->accumulate(-n.grad * a.value() / (b.value() * b.value()));
      });
}

// scale * x + shift
template <typename S>
TensorT<S> affine(const TensorT<S>& x, S scale, S shift) {
  return TensorT<S>::make(
      x.shape(), x.value() * scale + shift, {x},
      [x, scale](typename TensorT<S>::Node& n) mutable { x.node()->accumulate(n.grad * scale); });
}

template <typename S>
TensorT<S> neg(const TensorT<S>& x) {
  return affine(x, S(-1), S(0));
}

template <typename S>
TensorT<S> vexp(const TensorT<S>& x) {
  typename TensorT<S>::Array y = x.value().exp();
  return TensorT<S>::make(x.shape(), y, {x}, [x, y](typename TensorT<S>::Node& n) mutable {
    x.node()->accumulate(n.grad * y);
  });
}

template <typename S>
TensorT<S> vlog(const TensorT<S>& x) {
  if ((x.value() <= S(0)).any()) throw NumericError("log: non-positive input");
  return TensorT<S>::make(x.shape(), x.value().log(), {x},
                          [x](typename TensorT<S>::Node& n) mutable {
                            x.node()->accumulate(n.grad / x.value());
                          });
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  return TensorT<S>::make(x.shape(), x.value().max(S(0)), {x},
                          [x](typename TensorT<S>::Node& n) mutable {
                            x.node()->accumulate(n.grad * (x.value() > S(0)).template cast<S>());
                          });
}

template <typename S>
TensorT<S> clamp(const TensorT<S>& x, S lo, S hi) {
  return TensorT<S>::make(
      x.shape(), x.value().max(lo).min(hi), {x}, [x, lo, hi](typename TensorT<S>::Node& n) mutable {
        auto pass = ((x.value() >= lo) && (x.value() <= hi)).template cast<S>();
        x.node()->accumulate(n.grad * pass);
      });
}

// Cuts the graph: result shares the value but receives no gradient.
template <typename S>
TensorT<S> detach(const TensorT<S>& x) {
  return TensorT<S>::leaf(x.shape(), x.value(), false);
}

// ---------------------------------------------------------------------------
// Reductions and row ops

template <typename S>
TensorT<S> mean_all(const TensorT<S>& x) {
  const S inv = S(1) / S(x.numel());
  typename TensorT<S>::Array y(1);
  y[0] = x.value().sum() * inv;
  return TensorT<S>::make({}, y, {x}, [x, inv](typename TensorT<S>::Node& n) mutable {
    x.node()->accumulate(TensorT<S>::Array::Constant(x.numel(), n.grad[0] * inv));
  });
}

template <typename S>
TensorT<S> sum_rows(const TensorT<S>& x) {
  detail::require_rank(x, 2, "sum_rows");
  const Eigen::Index r = x.dim(0), c = x.dim(1);
  typename TensorT<S>::Array y(r);
  for (Eigen::Index i = 0; i < r; ++i) y[i] = x.value().segment(i * c, c).sum();
  return TensorT<S>::make({r}, y, {x}, [x, r, c](typename TensorT<S>::Node& n) mutable {
    typename TensorT<S>::Array g(r * c);
    for (Eigen::Index i = 0; i < r; ++i) g.segment(i * c, c).setConstant(n.grad[i]);
    x.node()->accumulate(g);
  });
}

template <typename S>
TensorT<S> l2_normalize_rows(const TensorT<S>& x) {
  detail::require_rank(x, 2, "l2_normalize_rows");
  const Eigen::Index r = x.dim(0), c = x.dim(1);
  typename TensorT<S>::Array y(r * c), norms(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const S n2 = std::sqrt(x.value().segment(i * c, c).square().sum());
    if (n2 < S(1e-12)) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    norms[i] = n2;
    y.segment(i * c, c) = x.value().segment(i * c, c) / n2;
  }
  return TensorT<S>::make(
      x.shape(), y, {x}, [x, y, norms, r, c](typename TensorT<S>::Node& n) mutable {
        typename TensorT<S>::Array g(r * c);
        for (Eigen::Index i = 0; i < r; ++i) {
          auto gi = n.grad.segment(i * c, c);
          auto yi = y.segment(i * c, c);
          const S dot = (gi * yi).sum();
          g.segment(i * c, c) = (gi - yi * dot) / norms[i];
        }
        x.node()->accumulate(g);
      });
}

template <typename S>
TensorT<S> log_softmax_rows(const TensorT<S>& x) {
  detail::require_rank(x, 2, "log_softmax_rows");
  const Eigen::Index r = x.dim(0), c = x.dim(1);
  typename TensorT<S>::Array y(r * c);
  for (Eigen::Index i = 0; i < r; ++i) {
    auto xi = x.value().segment(i * c, c);
    const S m = xi.maxCoeff();
    const S lse = m + std::log((xi - m).exp().sum());
    y.segment(i * c, c) = xi - lse;
  }
  return TensorT<S>::make(x.shape(), y, {x}, [x, y, r, c](typename TensorT<S>::Node& n) mutable {
    typename TensorT<S>::Array g(r * c);
    for (Eigen::Index i = 0; i < r; ++i) {
      auto gi = n.grad.segment(i * c, c);
      g.segment(i * c, c) = gi - y.segment(i * c, c).exp() * gi.sum();
    }
    x.node()->accumulate(g);
  });
}

template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const Eigen::Index r = x.dim(0), c = x.dim(1);
  typename TensorT<S>::Array y(r * c);
  for (Eigen::Index i = 0; i < r; ++i) {
    auto xi = x.value().segment(i * c, c);
    typename TensorT<S>::Array e = (xi - xi.maxCoeff()).exp();
    y.segment(i * c, c) = e / e.sum();
  }
  return TensorT<S>::make(x.shape(), y, {x}, [x, y, r, c](typename TensorT<S>::Node& n) mutable {
    typename TensorT<S>::Array g(r * c);
    for (Eigen::Index i = 0; i < r; ++i) {
      auto gi = n.grad.segment(i * c, c);
      auto yi = y.segment(i * c, c);
      g.segment(i * c, c) = yi * (gi - (gi * yi).sum());
    }
    x.node()->accumulate(g);
  });
}

template <typename S>
TensorT<S> gather_cols(const TensorT<S>& x, const std::vector<Eigen::Index>& cols) {
  detail::require_rank(x, 2, "gather_cols");
  const Eigen::Index r = x.dim(0), c = x.dim(1), m = static_cast<Eigen::Index>(cols.size());
  for (auto j : cols)
    if (j < 0 || j >= c) throw InputError("gather_cols: column index out of range");
  typename TensorT<S>::Array y(r * m);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < m; ++j) y[i * m + j] = x.value()[i * c + cols[j]];
  return TensorT<S>::make(
      {r, m}, y, {x}, [x, cols, r, c, m](typename TensorT<S>::Node& n) mutable {
        auto& g = x.node()->ensure_grad();
        for (Eigen::Index i = 0; i < r; ++i)
          for (Eigen::Index j = 0; j < m; ++j) g[i * c + cols[j]] += n.grad[i * m + j];
      });
}

// ---------------------------------------------------------------------------
// Dense layer

// x: [B, D], w: [K, D], b: [K]  ->  [B, K]
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const Eigen::Index B = x.dim(0), D = x.dim(1), K = w.dim(0);
  if (w.dim(1) != D || b.numel() != K)
    throw InputError("linear: weight/bias shapes do not match input");
  using MatRM = typename TensorT<S>::MatRM;
  Eigen::Map<const MatRM> X(x.value().data(), B, D);
  Eigen::Map<const MatRM> W(w.value().data(), K, D);
  typename TensorT<S>::Array y(B * K);
  Eigen::Map<MatRM> Y(y.data(), B, K);
  Y = X * W.transpose();
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.value().data(), K);
  return TensorT<S>::make(
      {B, K}, y, {x, w, b}, [x, w, b, B, D, K](typename TensorT<S>::Node& n) mutable {
        Eigen::Map<const MatRM> X(x.value().data(), B, D);
        Eigen::Map<const MatRM> W(w.value().data(), K, D);
        Eigen::Map<const MatRM> G(n.grad.data(), B, K);
        if (x.requires_grad()) {
          Eigen::Map<MatRM> GX(x.node()->ensure_grad().data(), B, D);
          GX.noalias() += G * W;
        }
        if (w.requires_grad()) {
          Eigen::Map<MatRM> GW(w.node()->ensure_grad().data(), K, D);
          GW.noalias() += G.transpose() * X;
        }
        if (b.requires_grad()) {
          Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> GB(b.node()->ensure_grad().data(), K);
          GB.noalias() += G.colwise().sum().transpose();
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)

namespace detail {

template <typename S>
void im2col(const S* x, Eigen::Index C, Eigen::Index H, Eigen::Index W, Eigen::Index kh,
            Eigen::Index kw, Eigen::Index stride, Eigen::Index pad, Eigen::Index OH,
            Eigen::Index OW, S* cols) {
  // cols is [C*kh*kw, OH*OW] column-major: cols[row + (oh*OW+ow)*C*kh*kw]
  const Eigen::Index rows = C * kh * kw;
  for (Eigen::Index oh = 0; oh < OH; ++oh) {
    for (Eigen::Index ow = 0; ow < OW; ++ow) {
      S* col = cols + (oh * OW + ow) * rows;
      for (Eigen::Index c = 0; c < C; ++c) {
        for (Eigen::Index i = 0; i < kh; ++i) {
          const Eigen::Index h = oh * stride - pad + i;
          for (Eigen::Index j = 0; j < kw; ++j) {
            const Eigen::Index w = ow * stride - pad + j;
            col[(c * kh + i) * kw + j] =
                (h >= 0 && h < H && w >= 0 && w < W) ? x[(c * H + h) * W + w] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* cols, Eigen::Index C, Eigen::Index H, Eigen::Index W, Eigen::Index kh,
                Eigen::Index kw, Eigen::Index stride, Eigen::Index pad, Eigen::Index OH,
                Eigen::Index OW, S* x) {
  const Eigen::Index rows = C * kh * kw;
  for (Eigen::Index oh = 0; oh < OH; ++oh) {
    for (Eigen::Index ow = 0; ow < OW; ++ow) {
      const S* col = cols + (oh * OW + ow) * rows;
      for (Eigen::Index c = 0; c < C; ++c) {
        for (Eigen::Index i = 0; i < kh; ++i) {
          const Eigen::Index h = oh * stride - pad + i;
          if (h < 0 || h >= H) continue;
          for (Eigen::Index j = 0; j < kw; ++j) {
            const Eigen::Index w = ow * stride - pad + j;
            if (w < 0 || w >= W) continue;
            x[(c * H + h) * W + w] += col[(c * kh + i) * kw + j];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [B, C, H, W], w: [K, C, kh, kw], b: [K]  ->  [B, K, OH, OW]
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                  Eigen::Index stride = 1, Eigen::Index pad = 0) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  const Eigen::Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Eigen::Index K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C) throw InputError("conv2d: channel mismatch");
  if (b.numel() != K) throw InputError("conv2d: bias size mismatch");
  const Eigen::Index OH = (H + 2 * pad - kh) / stride + 1;
  const Eigen::Index OW = (W + 2 * pad - kw) / stride + 1;
  if (OH < 1 || OW < 1) throw InputError("conv2d: kernel larger than padded input");
  using MatRM = typename TensorT<S>::MatRM;
  using MatCM = typename TensorT<S>::MatCM;
  const Eigen::Index rows = C * kh * kw;

  typename TensorT<S>::Array y(B * K * OH * OW);
  {
    MatCM cols(rows, OH * OW);
    Eigen::Map<const MatRM> Wm(w.value().data(), K, rows);
    for (Eigen::Index s = 0; s < B; ++s) {
      detail::im2col(x.value().data() + s * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
                     cols.data());
      Eigen::Map<MatRM> Ys(y.data() + s * K * OH * OW, K, OH * OW);
      Ys.noalias() = Wm * cols;
      Ys.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b.value().data(), K);
    }
  }
  return TensorT<S>::make(
      {B, K, OH, OW}, y, {x, w, b},
      [x, w, b, B, C, H, W, K, kh, kw, stride, pad, OH, OW,
       rows](typename TensorT<S>::Node& n) mutable {
        MatCM cols(rows, OH * OW);
        MatCM dcols(rows, OH * OW);
        Eigen::Map<const MatRM> Wm(w.value().data(), K, rows);
        for (Eigen::Index s = 0; s < B; ++s) {
          Eigen::Map<const MatRM> Gs(n.grad.data() + s * K * OH * OW, K, OH * OW);
          if (w.requires_grad() || x.requires_grad())
            detail::im2col(x.value().data() + s * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
                           cols.data());
          if (w.requires_grad()) {
            Eigen::Map<MatRM> GW(w.node()->ensure_grad().data(), K, rows);
            GW.noalias() += Gs * cols.transpose();
          }
          if (b.requires_grad()) {
            Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> GB(b.node()->ensure_grad().data(), K);
            GB.noalias() += Gs.rowwise().sum();
          }
          if (x.requires_grad()) {
            dcols.noalias() = Wm.transpose() * Gs;
            detail::col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                               x.node()->ensure_grad().data() + s * C * H * W);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling and resampling

// Non-overlapping k x k average pooling; H and W must be divisible by k.
template <typename S>
TensorT<S> avg_pool2d(const TensorT<S>& x, Eigen::Index k) {
  detail::require_rank(x, 4, "avg_pool2d");
  const Eigen::Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % k != 0 || W % k != 0)
    throw InputError("avg_pool2d: spatial size " + shape_str(x.shape()) +
                     " not divisible by kernel " + std::to_string(k));
  const Eigen::Index OH = H / k, OW = W / k;
  const S inv = S(1) / S(k * k);
  typename TensorT<S>::Array y(B * C * OH * OW);
  const S* xv = x.value().data();
  for (Eigen::Index bc = 0; bc < B * C; ++bc)
    for (Eigen::Index oh = 0; oh < OH; ++oh)
      for (Eigen::Index ow = 0; ow < OW; ++ow) {
        S acc = S(0);
        for (Eigen::Index i = 0; i < k; ++i)
          for (Eigen::Index j = 0; j < k; ++j)
            acc += xv[(bc * H + oh * k + i) * W + ow * k + j];
        y[(bc * OH + oh) * OW + ow] = acc * inv;
      }
  return TensorT<S>::make(
      {B, C, OH, OW}, y, {x}, [x, B, C, H, W, OH, OW, k, inv](typename TensorT<S>::Node& n) mutable {
        auto& g = x.node()->ensure_grad();
        for (Eigen::Index bc = 0; bc < B * C; ++bc)
          for (Eigen::Index oh = 0; oh < OH; ++oh)
            for (Eigen::Index ow = 0; ow < OW; ++ow) {
              const S gv = n.grad[(bc * OH + oh) * OW + ow] * inv;
              for (Eigen::Index i = 0; i < k; ++i)
                for (Eigen::Index j = 0; j < k; ++j)
                  g[(bc * H + oh * k + i) * W + ow * k + j] += gv;
            }
      });
}

// Output cell (i, j) averages the input window [floor(i*H/OH), ceil((i+1)*H/OH)).
template <typename S>
TensorT<S> adaptive_avg_pool(const TensorT<S>& x, Eigen::Index OH, Eigen::Index OW) {
  detail::require_rank(x, 4, "adaptive_avg_pool");
  const Eigen::Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (OH < 1 || OW < 1) throw InputError("adaptive_avg_pool: output size must be positive");
  auto lo = [](Eigen::Index i, Eigen::Index in, Eigen::Index out) { return (i * in) / out; };
  auto hi = [](Eigen::Index i, Eigen::Index in, Eigen::Index out) {
    return ((i + 1) * in + out - 1) / out;
  };
  typename TensorT<S>::Array y(B * C * OH * OW);
  const S* xv = x.value().data();
  for (Eigen::Index bc = 0; bc < B * C; ++bc)
    for (Eigen::Index oh = 0; oh < OH; ++oh) {
      const Eigen::Index h0 = lo(oh, H, OH), h1 = hi(oh, H, OH);
      for (Eigen::Index ow = 0; ow < OW; ++ow) {
        const Eigen::Index w0 = lo(ow, W, OW), w1 = hi(ow, W, OW);
        S acc = S(0);
        for (Eigen::Index h = h0; h < h1; ++h)
          for (Eigen::Index w = w0; w < w1; ++w) acc += xv[(bc * H + h) * W + w];
        y[(bc * OH + oh) * OW + ow] = acc / S((h1 - h0) * (w1 - w0));
      }
    }
  return TensorT<S>::make(
      {B, C, OH, OW}, y, {x},
      [x, B, C, H, W, OH, OW, lo, hi](typename TensorT<S>::Node& n) mutable {
        auto& g = x.node()->ensure_grad();
        for (Eigen::Index bc = 0; bc < B * C; ++bc)
          for (Eigen::Index oh = 0; oh < OH; ++oh) {
            const Eigen::Index h0 = lo(oh, H, OH), h1 = hi(oh, H, OH);
            for (Eigen::Index ow = 0; ow < OW; ++ow) {
              const Eigen::Index w0 = lo(ow, W, OW), w1 = hi(ow, W, OW);
              const S gv = n.grad[(bc * OH + oh) * OW + ow] / S((h1 - h0) * (w1 - w0));
              for (Eigen::Index h = h0; h < h1; ++h)
                for (Eigen::Index w = w0; w < w1; ++w) g[(bc * H + h) * W + w] += gv;
            }
          }
      });
}

// Bilinear interpolation with half-pixel source coordinates.
template <typename S>
TensorT<S> bilinear_resize(const TensorT<S>& x, Eigen::Index OH, Eigen::Index OW) {
  detail::require_rank(x, 4, "bilinear_resize");
  const Eigen::Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (OH < 1 || OW < 1) throw InputError("bilinear_resize: output size must be positive");
  struct Axis {
    std::vector<Eigen::Index> i0, i1;
    std::vector<S> t;
  };
  auto make_axis = [](Eigen::Index in, Eigen::Index out) {
    Axis a;
    a.i0.resize(out);
    a.i1.resize(out);
    a.t.resize(out);
    for (Eigen::Index o = 0; o < out; ++o) {
      S src = (S(o) + S(0.5)) * S(in) / S(out) - S(0.5);
      if (src < S(0)) src = S(0);
      Eigen::Index lo = std::min<Eigen::Index>(static_cast<Eigen::Index>(src), in - 1);
      a.i0[o] = lo;
      a.i1[o] = std::min(lo + 1, in - 1);
      a.t[o] = src - S(lo);
    }
    return a;
  };
  const Axis ay = make_axis(H, OH), ax = make_axis(W, OW);
  typename TensorT<S>::Array y(B * C * OH * OW);
  const S* xv = x.value().data();
  for (Eigen::Index bc = 0; bc < B * C; ++bc)
    for (Eigen::Index oh = 0; oh < OH; ++oh)
      for (Eigen::Index ow = 0; ow < OW; ++ow) {
        const S ty = ay.t[oh], tx = ax.t[ow];
        const S v00 = xv[(bc * H + ay.i0[oh]) * W + ax.i0[ow]];
        const S v01 = xv[(bc * H + ay.i0[oh]) * W + ax.i1[ow]];
        const S v10 = xv[(bc * H + ay.i1[oh]) * W + ax.i0[ow]];
        const S v11 = xv[(bc * H + ay.i1[oh]) * W + ax.i1[ow]];
        y[(bc * OH + oh) * OW + ow] = (S(1) - ty) * ((S(1) - tx) * v00 + tx * v01) +
                                      ty * ((S(1) - tx) * v10 + tx * v11);
      }
  return TensorT<S>::make(
      {B, C, OH, OW}, y, {x},
      [x, B, C, H, W, OH, OW, ay, ax](typename TensorT<S>::Node& n) mutable {
        auto& g = x.node()->ensure_grad();
        for (Eigen::Index bc = 0; bc < B * C; ++bc)
          for (Eigen::Index oh = 0; oh < OH; ++oh)
            for (Eigen::Index ow = 0; ow < OW; ++ow) {
              const S gv = n.grad[(bc * OH + oh) * OW + ow];
              const S ty = ay.t[oh], tx = ax.t[ow];
              g[(bc * H + ay.i0[oh]) * W + ax.i0[ow]] += gv * (S(1) - ty) * (S(1) - tx);
              g[(bc * H + ay.i0[oh]) * W + ax.i1[ow]] += gv * (S(1) - ty) * tx;
              g[(bc * H + ay.i1[oh]) * W + ax.i0[ow]] += gv * ty * (S(1) - tx);
              g[(bc * H + ay.i1[oh]) * W + ax.i1[ow]] += gv * ty * tx;
            }
      });
}

// [B, C, H, W] -> [B, C]
template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const Eigen::Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const S inv = S(1) / S(HW);
  typename TensorT<S>::Array y(B * C);
  for (Eigen::Index bc = 0; bc < B * C; ++bc) y[bc] = x.value().segment(bc * HW, HW).sum() * inv;
  return TensorT<S>::make({B, C}, y, {x}, [x, B, C, HW, inv](typename TensorT<S>::Node& n) mutable {
    auto& g = x.node()->ensure_grad();
    for (Eigen::Index bc = 0; bc < B * C; ++bc)
      g.segment(bc * HW, HW) += TensorT<S>::Array::Constant(HW, n.grad[bc] * inv);
  });
}

// ---------------------------------------------------------------------------
// Channel-axis ops

template <typename S>
TensorT<S> concat_channels(const std::vector<TensorT<S>>& xs) {
  if (xs.empty()) throw InputError("concat_channels: empty input list");
  const Eigen::Index B = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  Eigen::Index Ctot = 0;
  for (const auto& x : xs) {
    detail::require_rank(x, 4, "concat_channels");
    if (x.dim(0) != B || x.dim(2) != H || x.dim(3) != W)
      throw InputError("concat_channels: batch/spatial mismatch");
    Ctot += x.dim(1);
  }
  const Eigen::Index HW = H * W;
  typename TensorT<S>::Array y(B * Ctot * HW);
  Eigen::Index off = 0;
  for (const auto& x : xs) {
    const Eigen::Index C = x.dim(1);
    for (Eigen::Index b = 0; b < B; ++b)
      y.segment((b * Ctot + off) * HW, C * HW) = x.value().segment(b * C * HW, C * HW);
    off += C;
  }
  std::vector<TensorT<S>> parents = xs;
  return TensorT<S>::make(
      {B, Ctot, H, W}, y, parents, [parents, B, Ctot, HW](typename TensorT<S>::Node& n) mutable {
        Eigen::Index off = 0;
        for (auto& x : parents) {
          const Eigen::Index C = x.dim(1);
          if (x.requires_grad()) {
            auto& g = x.node()->ensure_grad();
            for (Eigen::Index b = 0; b < B; ++b)
              g.segment(b * C * HW, C * HW) += n.grad.segment((b * Ctot + off) * HW, C * HW);
          }
          off += C;
        }
      });
}

template <typename S>
TensorT<S> slice_channels(const TensorT<S>& x, Eigen::Index c0, Eigen::Index c1) {
  detail::require_rank(x, 4, "slice_channels");
  const Eigen::Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1) throw InputError("slice_channels: bad channel range");
  const Eigen::Index M = c1 - c0;
  typename TensorT<S>::Array y(B * M * HW);
  for (Eigen::Index b = 0; b < B; ++b)
    y.segment(b * M * HW, M * HW) = x.value().segment((b * C + c0) * HW, M * HW);
  return TensorT<S>::make(
      {B, M, x.dim(2), x.dim(3)}, y, {x},
      [x, B, C, HW, c0, M](typename TensorT<S>::Node& n) mutable {
        auto& g = x.node()->ensure_grad();
        for (Eigen::Index b = 0; b < B; ++b)
          g.segment((b * C + c0) * HW, M * HW) += n.grad.segment(b * M * HW, M * HW);
      });
}

// Channels hold `groups` blocks of equal width; softmax runs across blocks for
// every (channel-within-block, spatial) slot independently.
template <typename S>
TensorT<S> softmax_blocks(const TensorT<S>& x, Eigen::Index groups) {
  detail::require_rank(x, 4, "softmax_blocks");
  const Eigen::Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (groups < 1 || C % groups != 0)
    throw InputError("softmax_blocks: channels not divisible by group count");
  const Eigen::Index c = C / groups;
  typename TensorT<S>::Array y(x.numel());
  const S* xv = x.value().data();
  std::vector<S> e(groups);
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index p = 0; p < HW; ++p) {
        S m = -std::numeric_limits<S>::infinity();
        for (Eigen::Index l = 0; l < groups; ++l)
          m = std::max(m, xv[(b * C + l * c + j) * HW + p]);
        S sum = S(0);
        for (Eigen::Index l = 0; l < groups; ++l) {
          e[l] = std::exp(xv[(b * C + l * c + j) * HW + p] - m);
          sum += e[l];
        }
        for (Eigen::Index l = 0; l < groups; ++l) y[(b * C + l * c + j) * HW + p] = e[l] / sum;
      }
  return TensorT<S>::make(
      x.shape(), y, {x}, [x, y, B, C, HW, groups, c](typename TensorT<S>::Node& n) mutable {
        auto& g = x.node()->ensure_grad();
        for (Eigen::Index b = 0; b < B; ++b)
          for (Eigen::Index j = 0; j < c; ++j)
            for (Eigen::Index p = 0; p < HW; ++p) {
              S dot = S(0);
              for (Eigen::Index l = 0; l < groups; ++l) {
                const Eigen::Index idx = (b * C + l * c + j) * HW + p;
                dot += n.grad[idx] * y[idx];
              }
              for (Eigen::Index l = 0; l < groups; ++l) {
                const Eigen::Index idx = (b * C + l * c + j) * HW + p;
                g[idx] += y[idx] * (n.grad[idx] - dot);
              }
            }
      });
}

// x: [B, C, H, W] scaled by a one-channel map m: [B, 1, H, W].
template <typename S>
TensorT<S> mul_channel_bcast(const TensorT<S>& x, const TensorT<S>& m) {
  detail::require_rank(x, 4, "mul_channel_bcast");
  detail::require_rank(m, 4, "mul_channel_bcast");
  const Eigen::Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (m.dim(0) != B || m.dim(1) != 1 || m.dim(2) != x.dim(2) || m.dim(3) != x.dim(3))
    throw InputError("mul_channel_bcast: map must be [B,1,H,W] matching x");
  typename TensorT<S>::Array y(x.numel());
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index ch = 0; ch < C; ++ch)
      y.segment((b * C + ch) * HW, HW) =
          x.value().segment((b * C + ch) * HW, HW) * m.value().segment(b * HW, HW);
  return TensorT<S>::make(
      x.shape(), y, {x, m}, [x, m, B, C, HW](typename TensorT<S>::Node& n) mutable {
        if (x.requires_grad()) {
          auto& gx = x.node()->ensure_grad();
          for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index ch = 0; ch < C; ++ch)
              gx.segment((b * C + ch) * HW, HW) +=
                  n.grad.segment((b * C + ch) * HW, HW) * m.value().segment(b * HW, HW);
        }
        if (m.requires_grad()) {
          auto& gm = m.node()->ensure_grad();
          for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index ch = 0; ch < C; ++ch)
              gm.segment(b * HW, HW) +=
                  n.grad.segment((b * C + ch) * HW, HW) * x.value().segment((b * C + ch) * HW, HW);
        }
      });
}

// Every entry of sample b scaled by s[b]; s has numel == batch size.
template <typename S>
TensorT<S> mul_sample_bcast(const TensorT<S>& x, const TensorT<S>& s) {
  const Eigen::Index B = x.dim(0);
  if (s.numel() != B) throw InputError("mul_sample_bcast: scale count must equal batch size");
  const Eigen::Index stride = x.numel() / B;
  typename TensorT<S>::Array y(x.numel());
  for (Eigen::Index b = 0; b < B; ++b)
    y.segment(b * stride, stride) = x.value().segment(b * stride, stride) * s.value()[b];
  return TensorT<S>::make(
      x.shape(), y, {x, s}, [x, s, B, stride](typename TensorT<S>::Node& n) mutable {
        if (x.requires_grad()) {
          auto& gx = x.node()->ensure_grad();
          for (Eigen::Index b = 0; b < B; ++b)
            gx.segment(b * stride, stride) += n.grad.segment(b * stride, stride) * s.value()[b];
        }
        if (s.requires_grad()) {
          auto& gs = s.node()->ensure_grad();
          for (Eigen::Index b = 0; b < B; ++b)
            gs[b] += (n.grad.segment(b * stride, stride) * x.value().segment(b * stride, stride))
                         .sum();
        }
      });
}

// ---------------------------------------------------------------------------
// Squared pooled projections used by the pooled-activation distance.

// out[b, c*H + h] = sum_w x[b,c,h,w]^2
template <typename S>
TensorT<S> sqsum_over_w(const TensorT<S>& x) {
  detail::require_rank(x, 4, "sqsum_over_w");
  const Eigen::Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  typename TensorT<S>::Array y(B * C * H);
  for (Eigen::Index i = 0; i < B * C * H; ++i) y[i] = x.value().segment(i * W, W).square().sum();
  return TensorT<S>::make({B, C * H}, y, {x}, [x, B, C, H, W](typename TensorT<S>::Node& n) mutable {
    auto& g = x.node()->ensure_grad();
    for (Eigen::Index i = 0; i < B * C * H; ++i)
      g.segment(i * W, W) += S(2) * n.grad[i] * x.value().segment(i * W, W);
  });
}

// out[b, c*W + w] = sum_h x[b,c,h,w]^2
template <typename S>
TensorT<S> sqsum_over_h(const TensorT<S>& x) {
  detail::require_rank(x, 4, "sqsum_over_h");
  const Eigen::Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  typename TensorT<S>::Array y = TensorT<S>::Array::Zero(B * C * W);
  const S* xv = x.value().data();
  for (Eigen::Index bc = 0; bc < B * C; ++bc)
    for (Eigen::Index h = 0; h < H; ++h)
      for (Eigen::Index w = 0; w < W; ++w) {
        const S v = xv[(bc * H + h) * W + w];
        y[bc * W + w] += v * v;
      }
  return TensorT<S>::make({B, C * W}, y, {x}, [x, B, C, H, W](typename TensorT<S>::Node& n) mutable {
    auto& g = x.node()->ensure_grad();
    const S* xv = x.value().data();
    for (Eigen::Index bc = 0; bc < B * C; ++bc)
      for (Eigen::Index h = 0; h < H; ++h)
        for (Eigen::Index w = 0; w < W; ++w)
          g[(bc * H + h) * W + w] += S(2) * n.grad[bc * W + w] * xv[(bc * H + h) * W + w];
  });
}

}  // namespace cil
