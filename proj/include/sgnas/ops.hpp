#pragma once

// Differentiable primitives. Layout is NCHW for image tensors and [rows, cols]
// for matrices. Every op checks its shapes and raises DimensionError naming
// the offending axis.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "sgnas/tensor.hpp"

namespace sgnas {

namespace detail {

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                           std::initializer_list<BasicTensor<T>> parents) {
  auto out = BasicTensor<T>::from(std::move(shape), std::move(value));
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    Node<T>* n = out.node();
    n->requires_grad = true;
    n->op = op;
    for (const auto& p : parents) n->parents.push_back(p.shared());
  }
  return out;
}

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                           const std::vector<BasicTensor<T>>& parents) {
  auto out = BasicTensor<T>::from(std::move(shape), std::move(value));
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    Node<T>* n = out.node();
    n->requires_grad = true;
    n->op = op;
    for (const auto& p : parents) n->parents.push_back(p.shared());
  }
  return out;
}

// Grad buffer of parent i, or nullptr when it does not participate.
template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
  Node<T>* p = self.parents[i].get();
  return p->requires_grad ? p->grad_buffer() : nullptr;
}

inline void require(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw DimensionError(op + ": " + what);
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  auto out = detail::make_result<T>(a.shape(), std::move(v), "add", {a, b});
  if (out.requires_grad())
    out.node()->backward = [](Node<T>& self) {
      for (std::size_t k = 0; k < 2; ++k)
        if (T* g = detail::parent_grad(self, k))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  auto out = detail::make_result<T>(a.shape(), std::move(v), "sub", {a, b});
  if (out.requires_grad())
    out.node()->backward = [](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      if (T* g = detail::parent_grad(self, 1))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    };
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  auto out = detail::make_result<T>(a.shape(), std::move(v), "mul", {a, b});
  if (out.requires_grad())
    out.node()->backward = [](Node<T>& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
      if (T* g = detail::parent_grad(self, 1))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    };
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * s;
  auto out = detail::make_result<T>(a.shape(), std::move(v), "scale", {a});
  if (out.requires_grad())
    out.node()->backward = [s](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    };
  return out;
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + s;
  auto out = detail::make_result<T>(a.shape(), std::move(v), "add_scalar", {a});
  if (out.requires_grad())
    out.node()->backward = [](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  return out;
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& a) {
  return mul(a, a);
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] > T(0) ? a[i] : T(0);
  auto out = detail::make_result<T>(a.shape(), std::move(v), "relu", {a});
  if (out.requires_grad())
    out.node()->backward = [](Node<T>& self) {
      const auto& av = self.parents[0]->value;
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (av[i] > T(0)) g[i] += self.grad[i];
    };
  return out;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> v(a.values().begin(), a.values().end());
  auto out = detail::make_result<T>(std::move(shape), std::move(v), "reshape", {a});
  if (out.requires_grad())
    out.node()->backward = [](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  auto out = detail::make_result<T>({1}, {s}, "sum", {a});
  if (out.requires_grad())
    out.node()->backward = [](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0)) {
        const std::size_t n = self.parents[0]->value.size();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
      }
    };
  return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Inner product with a constant vector: the workhorse of linear cost models.
template <typename T>
BasicTensor<T> dot_const(const BasicTensor<T>& a, std::vector<T> weights) {
  if (weights.size() != a.size())
    throw DimensionError("dot_const: tensor has " + std::to_string(a.size()) +
                         " values, weights have " + std::to_string(weights.size()));
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * weights[i];
  auto out = detail::make_result<T>({1}, {s}, "dot_const", {a});
  if (out.requires_grad())
    out.node()->backward = [w = std::move(weights)](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t i = 0; i < w.size(); ++i) g[i] += self.grad[0] * w[i];
    };
  return out;
}

// [N,C,H,W] -> [N,C]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool", "input must be rank 4, got " +
                                                         shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> v(n * c, T(0));
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::size_t k = 0; k < hw; ++k) s += x[i * hw + k];
    v[i] = s * inv;
  }
  auto out = detail::make_result<T>({n, c}, std::move(v), "global_avg_pool", {x});
  if (out.requires_grad())
    out.node()->backward = [hw, inv](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          for (std::size_t k = 0; k < hw; ++k) g[i * hw + k] += self.grad[i] * inv;
    };
  return out;
}

// ---------------------------------------------------------------- dense / softmax

// x[N,In] * w[Out,In]^T + b[Out]
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, const BasicTensor<T>& w,
                     const BasicTensor<T>& b) {
  detail::require(x.rank() == 2, "dense", "input must be rank 2, got " + shape_str(x.shape()));
  detail::require(w.rank() == 2, "dense", "weight must be rank 2");
  const std::size_t n = x.dim(0), in = x.dim(1), o = w.dim(0);
  detail::require(w.dim(1) == in, "dense",
                  "axis 1 (features): input " + std::to_string(in) + " vs weight " +
                      std::to_string(w.dim(1)));
  detail::require(b.size() == o, "dense", "bias length " + std::to_string(b.size()) +
                                              " vs outputs " + std::to_string(o));
  std::vector<T> v(n * o);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < o; ++j) {
      T s = b[j];
      for (std::size_t k = 0; k < in; ++k) s += x[r * in + k] * w[j * in + k];
      v[r * o + j] = s;
    }
  auto out = detail::make_result<T>({n, o}, std::move(v), "dense", {x, w, b});
  if (out.requires_grad())
    out.node()->backward = [n, in, o](Node<T>& self) {
      const auto& xv = self.parents[0]->value;
      const auto& wv = self.parents[1]->value;
      const auto& gy = self.grad;
      if (T* gx = detail::parent_grad(self, 0))
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < o; ++j)
            for (std::size_t k = 0; k < in; ++k) gx[r * in + k] += gy[r * o + j] * wv[j * in + k];
      if (T* gw = detail::parent_grad(self, 1))
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < o; ++j)
            for (std::size_t k = 0; k < in; ++k) gw[j * in + k] += gy[r * o + j] * xv[r * in + k];
      if (T* gb = detail::parent_grad(self, 2))
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < o; ++j) gb[j] += gy[r * o + j];
    };
  return out;
}

// Row-wise softmax over the last axis of a rank-2 tensor.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  detail::require(x.rank() == 2, "softmax", "input must be rank 2, got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), k = x.dim(1);
  std::vector<T> v(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, x[r * k + j]);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += (v[r * k + j] = std::exp(x[r * k + j] - mx));
    for (std::size_t j = 0; j < k; ++j) v[r * k + j] /= z;
  }
  auto out = detail::make_result<T>(x.shape(), std::move(v), "softmax", {x});
  if (out.requires_grad())
    out.node()->backward = [rows, k](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t j = 0; j < k; ++j) dot += self.grad[r * k + j] * self.value[r * k + j];
          for (std::size_t j = 0; j < k; ++j)
            g[r * k + j] += self.value[r * k + j] * (self.grad[r * k + j] - dot);
        }
    };
  return out;
}

// Mean negative log-likelihood of integer labels under row-wise softmax.
template <typename T>
BasicTensor<T> cross_entropy_loss(const BasicTensor<T>& logits, const std::vector<int>& labels) {
  detail::require(logits.rank() == 2, "cross_entropy_loss",
                  "logits must be rank 2, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  detail::require(labels.size() == n, "cross_entropy_loss",
                  "axis 0 (batch): logits " + std::to_string(n) + " vs labels " +
                      std::to_string(labels.size()));
  std::vector<T> prob(n * k);
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k)
      throw ContractError("cross_entropy_loss: label " + std::to_string(labels[r]) +
                          " outside [0," + std::to_string(k) + ")");
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits[r * k + j]);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += (prob[r * k + j] = std::exp(logits[r * k + j] - mx));
    for (std::size_t j = 0; j < k; ++j) prob[r * k + j] /= z;
    loss -= logits[r * k + labels[r]] - mx - std::log(z);
  }
  loss /= static_cast<T>(n);
  auto out = detail::make_result<T>({1}, {loss}, "cross_entropy", {logits});
  if (out.requires_grad())
    out.node()->backward = [n, k, labels, prob = std::move(prob)](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0)) {
        const T s = self.grad[0] / static_cast<T>(n);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < k; ++j)
            g[r * k + j] += s * (prob[r * k + j] - (static_cast<int>(j) == labels[r] ? T(1) : T(0)));
      }
    };
  return out;
}

// ---------------------------------------------------------------- convolution

// 2-D convolution with "same" padding (K-1)/2; H' = ceil(H/stride) for odd K.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride = 1,
                      std::size_t groups = 1) {
  detail::require(x.rank() == 4, "conv2d", "input must be rank 4, got " + shape_str(x.shape()));
  detail::require(w.rank() == 4, "conv2d", "kernel must be rank 4, got " + shape_str(w.shape()));
  detail::require(stride >= 1 && groups >= 1, "conv2d", "stride and groups must be positive");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::require(cin % groups == 0, "conv2d",
                  "axis 1 (channels): " + std::to_string(cin) + " not divisible by groups " +
                      std::to_string(groups));
  detail::require(cout % groups == 0, "conv2d",
                  "kernel axis 0 (out channels): " + std::to_string(cout) +
                      " not divisible by groups " + std::to_string(groups));
  detail::require(w.dim(1) == cin / groups, "conv2d",
                  "kernel axis 1 (in channels/groups): expected " +
                      std::to_string(cin / groups) + ", got " + std::to_string(w.dim(1)));
  detail::require(kh == kw && kh % 2 == 1, "conv2d", "kernel axes 2,3 must be equal and odd");
  const std::size_t k = kh, pad = (k - 1) / 2;
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;

  // Visits every (output pixel, tap) pair with in-bounds input.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t oc = g * cout_g; oc < (g + 1) * cout_g; ++oc)
          for (std::size_t icg = 0; icg < cin_g; ++icg) {
            const std::size_t ic = g * cin_g + icg;
            const std::size_t in_base = (b * cin + ic) * h * wd;
            const std::size_t out_base = (b * cout + oc) * ho * wo;
            const std::size_t w_base = (oc * cin_g + icg) * k * k;
            for (std::size_t dy = 0; dy < k; ++dy)
              for (std::size_t dx = 0; dx < k; ++dx) {
                const std::size_t widx = w_base + dy * k + dx;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const long iy = static_cast<long>(oy * stride + dy) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  // ox range with ix = ox*stride + dx - pad inside [0, wd)
                  std::size_t ox_lo = 0;
                  if (dx < pad) ox_lo = (pad - dx + stride - 1) / stride;
                  long ox_hi_l = (static_cast<long>(wd) - 1 + static_cast<long>(pad) -
                                  static_cast<long>(dx)) / static_cast<long>(stride);
                  std::size_t ox_hi = static_cast<std::size_t>(
                      std::min<long>(ox_hi_l, static_cast<long>(wo) - 1));
                  if (ox_hi_l < 0) continue;
                  fn(in_base + static_cast<std::size_t>(iy) * wd, out_base + oy * wo, widx, ox_lo,
                     ox_hi, dx);
                }
              }
          }
  };

  std::vector<T> v(n * cout * ho * wo, T(0));
  const auto& xv = x.values();
  const auto& wv = w.values();
  for_each_tap([&](std::size_t in_row, std::size_t out_row, std::size_t widx, std::size_t lo,
                   std::size_t hi, std::size_t dx) {
    const T wt = wv[widx];
    for (std::size_t ox = lo; ox <= hi; ++ox)
      v[out_row + ox] += wt * xv[in_row + ox * stride + dx - pad];
  });

  auto out = detail::make_result<T>({n, cout, ho, wo}, std::move(v), "conv2d", {x, w});
  if (out.requires_grad())
    out.node()->backward = [for_each_tap, stride, pad](Node<T>& self) {
      const auto& xv = self.parents[0]->value;
      const auto& wv = self.parents[1]->value;
      const auto& gy = self.grad;
      T* gx = detail::parent_grad(self, 0);
      T* gw = detail::parent_grad(self, 1);
      for_each_tap([&](std::size_t in_row, std::size_t out_row, std::size_t widx, std::size_t lo,
                       std::size_t hi, std::size_t dx) {
        if (gx) {
          const T wt = wv[widx];
          for (std::size_t ox = lo; ox <= hi; ++ox)
            gx[in_row + ox * stride + dx - pad] += wt * gy[out_row + ox];
        }
        if (gw) {
          T acc = 0;
          for (std::size_t ox = lo; ox <= hi; ++ox)
            acc += gy[out_row + ox] * xv[in_row + ox * stride + dx - pad];
          gw[widx] += acc;
        }
      });
    };
  return out;
}

// ---------------------------------------------------------------- batch norm

template <typename T>
struct BNStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BNStats() = default;
  explicit BNStats(std::size_t channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
  std::size_t channels() const { return running_mean.size(); }
};

// Normalises axis 1 of a [N,C,...] tensor. Training mode uses batch
// statistics and folds them into the running estimates; eval mode uses the
// running estimates.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BNStats<T>& stats, bool training) {
  detail::require(x.rank() >= 2, "batch_norm", "input must have a channel axis");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.size() / (n * c);
  detail::require(stats.channels() == c, "batch_norm",
                  "axis 1 (channels): input " + std::to_string(c) + " vs stats " +
                      std::to_string(stats.channels()));
  detail::require(gamma.size() == c && beta.size() == c, "batch_norm",
                  "affine parameters must have " + std::to_string(c) + " entries");
  const std::size_t m = n * spatial;
  std::vector<T> mu(c), invstd(c), xhat(x.size()), v(x.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mean_c, var_c;
    if (training) {
      T s = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < spatial; ++i) s += x[(b * c + ch) * spatial + i];
      mean_c = s / static_cast<T>(m);
      T ss = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < spatial; ++i) {
          const T d = x[(b * c + ch) * spatial + i] - mean_c;
          ss += d * d;
        }
      var_c = ss / static_cast<T>(m);
      const T unbiased = m > 1 ? ss / static_cast<T>(m - 1) : var_c;
      stats.running_mean[ch] = (T(1) - stats.momentum) * stats.running_mean[ch] + stats.momentum * mean_c;
      stats.running_var[ch] = (T(1) - stats.momentum) * stats.running_var[ch] + stats.momentum * unbiased;
    } else {
      mean_c = stats.running_mean[ch];
      var_c = stats.running_var[ch];
    }
    mu[ch] = mean_c;
    invstd[ch] = T(1) / std::sqrt(var_c + stats.eps);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < spatial; ++i) {
        const std::size_t idx = (b * c + ch) * spatial + i;
        xhat[idx] = (x[idx] - mean_c) * invstd[ch];
        v[idx] = gamma[ch] * xhat[idx] + beta[ch];
      }
  }
  auto out = detail::make_result<T>(x.shape(), std::move(v), "batch_norm", {x, gamma, beta});
  if (out.requires_grad())
    out.node()->backward = [n, c, spatial, m, training, invstd = std::move(invstd),
                            xhat = std::move(xhat)](Node<T>& self) {
      const auto& gv = self.parents[1]->value;
      const auto& gy = self.grad;
      T* gx = detail::parent_grad(self, 0);
      T* gg = detail::parent_grad(self, 1);
      T* gb = detail::parent_grad(self, 2);
      for (std::size_t ch = 0; ch < c; ++ch) {
        T sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < spatial; ++i) {
            const std::size_t idx = (b * c + ch) * spatial + i;
            sum_dy += gy[idx];
            sum_dy_xhat += gy[idx] * xhat[idx];
          }
        if (gg) gg[ch] += sum_dy_xhat;
        if (gb) gb[ch] += sum_dy;
        if (!gx) continue;
        const T k = gv[ch] * invstd[ch];
        if (training) {
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < spatial; ++i) {
              const std::size_t idx = (b * c + ch) * spatial + i;
              gx[idx] += k * (gy[idx] - inv_m * sum_dy - xhat[idx] * inv_m * sum_dy_xhat);
            }
        } else {
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < spatial; ++i) {
              const std::size_t idx = (b * c + ch) * spatial + i;
              gx[idx] += k * gy[idx];
            }
        }
      }
    };
  return out;
}

// ---------------------------------------------------------------- channel plumbing

// Channels [begin, end) of a [N,C,H,W] tensor.
template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require(x.rank() == 4, "slice_channels", "input must be rank 4");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  detail::require(begin < end && end <= c, "slice_channels",
                  "axis 1 (channels): range [" + std::to_string(begin) + "," +
                      std::to_string(end) + ") outside " + std::to_string(c));
  const std::size_t cs = end - begin;
  std::vector<T> v(n * cs * hw);
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(x.values().begin() + (b * c + begin) * hw, cs * hw, v.begin() + b * cs * hw);
  auto out = detail::make_result<T>({n, cs, x.dim(2), x.dim(3)}, std::move(v), "slice_channels", {x});
  if (out.requires_grad())
    out.node()->backward = [n, c, hw, begin, cs](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < cs * hw; ++i)
            g[(b * c + begin) * hw + i] += self.grad[b * cs * hw + i];
    };
  return out;
}

template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels", "no inputs");
  const auto& first = parts.front();
  detail::require(first.rank() == 4, "concat_channels", "inputs must be rank 4");
  const std::size_t n = first.dim(0), h = first.dim(2), w = first.dim(3), hw = h * w;
  std::size_t c = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    detail::require(p.rank() == 4 && p.dim(0) == n && p.dim(2) == h && p.dim(3) == w,
                    "concat_channels",
                    "part " + shape_str(p.shape()) + " incompatible with " + shape_str(first.shape()));
    offsets.push_back(c);
    c += p.dim(1);
  }
  std::vector<T> v(n * c * hw);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t cs = parts[k].dim(1);
    for (std::size_t b = 0; b < n; ++b)
      std::copy_n(parts[k].values().begin() + b * cs * hw, cs * hw,
                  v.begin() + (b * c + offsets[k]) * hw);
  }
  auto out = detail::make_result<T>({n, c, h, w}, std::move(v), "concat_channels", parts);
  if (out.requires_grad())
    out.node()->backward = [n, c, hw, offsets](Node<T>& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        T* g = detail::parent_grad(self, k);
        if (!g) continue;
        const std::size_t cs = self.parents[k]->shape[1];
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < cs * hw; ++i)
            g[b * cs * hw + i] += self.grad[(b * c + offsets[k]) * hw + i];
      }
    };
  return out;
}

// Keeps every stride-th pixel starting at the origin; the parameter-free
// counterpart of a strided identity convolution.
template <typename T>
BasicTensor<T> subsample(const BasicTensor<T>& x, std::size_t stride) {
  if (stride == 1) return x;
  detail::require(x.rank() == 4, "subsample", "input must be rank 4");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;
  std::vector<T> v(n * c * ho * wo);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        v[(p * ho + y) * wo + xx] = x[(p * h + y * stride) * w + xx * stride];
  auto out = detail::make_result<T>({n, c, ho, wo}, std::move(v), "subsample", {x});
  if (out.requires_grad())
    out.node()->backward = [n, c, h, w, ho, wo, stride](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t p = 0; p < n * c; ++p)
          for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t xx = 0; xx < wo; ++xx)
              g[(p * h + y * stride) * w + xx * stride] += self.grad[(p * ho + y) * wo + xx];
    };
  return out;
}

// Row r of a rank-2 tensor as a rank-1 tensor.
template <typename T>
BasicTensor<T> row(const BasicTensor<T>& x, std::size_t r) {
  detail::require(x.rank() == 2, "row", "input must be rank 2, got " + shape_str(x.shape()));
  detail::require(r < x.dim(0), "row", "axis 0: index " + std::to_string(r) + " out of range");
  const std::size_t k = x.dim(1);
  std::vector<T> v(x.values().begin() + r * k, x.values().begin() + (r + 1) * k);
  auto out = detail::make_result<T>({k}, std::move(v), "row", {x});
  if (out.requires_grad())
    out.node()->backward = [r, k](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0))
        for (std::size_t j = 0; j < k; ++j) g[r * k + j] += self.grad[j];
    };
  return out;
}

// sum_i weights[i] * outputs[i]; differentiable in both arguments.
template <typename T>
BasicTensor<T> weighted_sum(const std::vector<BasicTensor<T>>& outputs, const BasicTensor<T>& weights) {
  detail::require(!outputs.empty(), "weighted_sum", "no candidate outputs");
  detail::require(weights.size() == outputs.size(), "weighted_sum",
                  "weights " + std::to_string(weights.size()) + " vs outputs " +
                      std::to_string(outputs.size()));
  for (const auto& o : outputs) detail::require_same_shape(o, outputs.front(), "weighted_sum");
  const std::size_t len = outputs.front().size();
  std::vector<T> v(len, T(0));
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const T m = weights[k];
    for (std::size_t i = 0; i < len; ++i) v[i] += m * outputs[k][i];
  }
  std::vector<BasicTensor<T>> parents(outputs);
  parents.push_back(weights);
  auto out = detail::make_result<T>(outputs.front().shape(), std::move(v), "weighted_sum", parents);
  if (out.requires_grad())
    out.node()->backward = [len](Node<T>& self) {
      const std::size_t k = self.parents.size() - 1;
      const auto& wv = self.parents[k]->value;
      T* gw = detail::parent_grad(self, k);
      for (std::size_t j = 0; j < k; ++j) {
        const auto& ov = self.parents[j]->value;
        if (T* g = detail::parent_grad(self, j))
          for (std::size_t i = 0; i < len; ++i) g[i] += wv[j] * self.grad[i];
        if (gw) {
          T acc = 0;
          for (std::size_t i = 0; i < len; ++i) acc += self.grad[i] * ov[i];
          gw[j] += acc;
        }
      }
    };
  return out;
}

// Escape hatch for ops whose forward and gradient are computed together
// outside the graph (e.g. enumerated expectations). `grad_fn` receives the
// upstream scalar gradient and must return d(out)/d(input) scaled by it.
template <typename T, typename GradFn>
BasicTensor<T> scalar_custom_op(const BasicTensor<T>& input, T value, GradFn grad_fn,
                                const char* name = "custom") {
  auto out = detail::make_result<T>({1}, {value}, name, {input});
  if (out.requires_grad())
    out.node()->backward = [grad_fn = std::move(grad_fn)](Node<T>& self) {
      if (T* g = detail::parent_grad(self, 0)) {
        const std::vector<T> d = grad_fn(self.grad[0]);
        for (std::size_t i = 0; i < d.size(); ++i) g[i] += d[i];
      }
    };
  return out;
}

}  // namespace sgnas
