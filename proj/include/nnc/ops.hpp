#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "nnc/tensor.hpp"

namespace nnc {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatRM<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatRM<S>>;

namespace detail {

template <typename S>
inline void expect_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " differ");
}

inline int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimError("axis out of range");
  return axis;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "add");
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) y.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  if (tracking(a) || tracking(b)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([a, b, y]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "sub");
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) y.ptr()[i] = a.ptr()[i] - b.ptr()[i];
  if (tracking(a) || tracking(b)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([a, b, y]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "mul");
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) y.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  if (tracking(a) || tracking(b)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([a, b, y]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b.ptr()[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a.ptr()[i];
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) y.ptr()[i] = a.ptr()[i] * c;
  if (tracking(a)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([a, y, c]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * c;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) y.ptr()[i] = x.ptr()[i] > S(0) ? x.ptr()[i] : S(0);
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (x.ptr()[i] > S(0)) gx[i] += gy[i];
    });
  }
  return y;
}

template <typename S>
Tensor<S> relu6(const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) y.ptr()[i] = std::min(std::max(x.ptr()[i], S(0)), S(6));
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (x.ptr()[i] > S(0) && x.ptr()[i] < S(6)) gx[i] += gy[i];
    });
  }
  return y;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const S v = x.ptr()[i];
    y.ptr()[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                           : std::exp(v) / (S(1) + std::exp(v));
  }
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const S s = y.ptr()[i];
        gx[i] += gy[i] * s * (S(1) - s);
      }
    });
  }
  return y;
}

// x * sigmoid(x)
template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const S v = x.ptr()[i];
    const S s = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
    y.ptr()[i] = v * s;
  }
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const S v = x.ptr()[i];
        const S s = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
        gx[i] += gy[i] * (s + v * s * (S(1) - s));
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                   shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> y = Tensor<S>::zeros({m, n});
  MatMap<S>(y.ptr(), m, n).noalias() =
      ConstMatMap<S>(a.ptr(), m, k) * ConstMatMap<S>(b.ptr(), k, n);
  if (tracking(a) || tracking(b)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([a, b, y, m, k, n]() mutable {
      if (!y.has_grad()) return;
      ConstMatMap<S> gy(y.grad_view().data(), m, n);
      if (a.requires_grad())
        MatMap<S>(a.grad().data(), m, k).noalias() +=
            gy * ConstMatMap<S>(b.ptr(), k, n).transpose();
      if (b.requires_grad())
        MatMap<S>(b.grad().data(), k, n).noalias() +=
            ConstMatMap<S>(a.ptr(), m, k).transpose() * gy;
    });
  }
  return y;
}

// y = x W^T + bias, x: [B, in], W: [out, in]
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias = {}) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw DimError("linear: incompatible shapes " + shape_str(x.shape()) + " and weight " +
                   shape_str(w.shape()));
  const std::int64_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (bias.defined() && bias.numel() != out) throw DimError("linear: bias length mismatch");
  Tensor<S> y = Tensor<S>::zeros({batch, out});
  MatMap<S>(y.ptr(), batch, out).noalias() =
      ConstMatMap<S>(x.ptr(), batch, in) * ConstMatMap<S>(w.ptr(), out, in).transpose();
  if (bias.defined())
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t o = 0; o < out; ++o) y.ptr()[b * out + o] += bias.ptr()[o];
  if (tracking(x) || tracking(w) || (bias.defined() && tracking(bias))) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, w, bias, y, batch, in, out]() mutable {
      if (!y.has_grad()) return;
      ConstMatMap<S> gy(y.grad_view().data(), batch, out);
      if (x.requires_grad())
        MatMap<S>(x.grad().data(), batch, in).noalias() += gy * ConstMatMap<S>(w.ptr(), out, in);
      if (w.requires_grad())
        MatMap<S>(w.grad().data(), out, in).noalias() +=
            gy.transpose() * ConstMatMap<S>(x.ptr(), batch, in);
      if (bias.defined() && bias.requires_grad()) {
        auto& gb = bias.grad();
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t o = 0; o < out; ++o) gb[static_cast<std::size_t>(o)] += gy(b, o);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw DimError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                   shape_str(new_shape));
  Tensor<S> y = Tensor<S>::from(std::move(new_shape), x.data());
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

// Concatenate two NCHW tensors along channels. Backward splits grads exactly.
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3))
    throw DimError("concat_channels: shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " not concatenable");
  const std::int64_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::int64_t hw = a.dim(2) * a.dim(3);
  Tensor<S> y = Tensor<S>::zeros({batch, ca + cb, a.dim(2), a.dim(3)});
  for (std::int64_t n = 0; n < batch; ++n) {
    std::copy_n(a.ptr() + n * ca * hw, ca * hw, y.ptr() + n * (ca + cb) * hw);
    std::copy_n(b.ptr() + n * cb * hw, cb * hw, y.ptr() + n * (ca + cb) * hw + ca * hw);
  }
  if (tracking(a) || tracking(b)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([a, b, y, batch, ca, cb, hw]() mutable {
      if (!y.has_grad()) return;
      const S* gy = y.grad_view().data();
      for (std::int64_t n = 0; n < batch; ++n) {
        const S* row = gy + n * (ca + cb) * hw;
        if (a.requires_grad()) {
          S* ga = a.grad().data() + n * ca * hw;
          for (std::int64_t i = 0; i < ca * hw; ++i) ga[i] += row[i];
        }
        if (b.requires_grad()) {
          S* gb = b.grad().data() + n * cb * hw;
          for (std::int64_t i = 0; i < cb * hw; ++i) gb[i] += row[ca * hw + i];
        }
      }
    });
  }
  return y;
}

// Per-channel gate: y[b,c,h,w] = x[b,c,h,w] * s[b,c]  (squeeze-excitation).
template <typename S>
Tensor<S> channel_scale(const Tensor<S>& x, const Tensor<S>& s) {
  if (x.rank() != 4 || s.rank() != 2 || s.dim(0) != x.dim(0) || s.dim(1) != x.dim(1))
    throw DimError("channel_scale: gate shape " + shape_str(s.shape()) +
                   " incompatible with input " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S g = s.ptr()[n * c + ch];
      const S* xi = x.ptr() + (n * c + ch) * hw;
      S* yi = y.ptr() + (n * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) yi[i] = xi[i] * g;
    }
  if (tracking(x) || tracking(s)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, s, y, batch, c, hw]() mutable {
      if (!y.has_grad()) return;
      const S* gy = y.grad_view().data();
      for (std::int64_t n = 0; n < batch; ++n)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const S* g = gy + (n * c + ch) * hw;
          if (x.requires_grad()) {
            S* gx = x.grad().data() + (n * c + ch) * hw;
            const S gv = s.ptr()[n * c + ch];
            for (std::int64_t i = 0; i < hw; ++i) gx[i] += g[i] * gv;
          }
          if (s.requires_grad()) {
            const S* xi = x.ptr() + (n * c + ch) * hw;
            S acc = S(0);
            for (std::int64_t i = 0; i < hw; ++i) acc += g[i] * xi[i];
            s.grad()[static_cast<std::size_t>(n * c + ch)] += acc;
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = S(0);
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.ptr()[i];
  Tensor<S> y = Tensor<S>::scalar(acc);
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y]() mutable {
      if (!y.has_grad()) return;
      const S g = y.grad_view()[0];
      auto& gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const S inv = S(1) / static_cast<S>(x.numel());
  S acc = S(0);
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.ptr()[i];
  Tensor<S> y = Tensor<S>::scalar(acc * inv);
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y, inv]() mutable {
      if (!y.has_grad()) return;
      const S g = y.grad_view()[0] * inv;
      auto& gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Softmax family and losses
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  const int ax = detail::normalize_axis(axis, x.rank());
  const std::int64_t n = x.dim(ax);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(i);
  for (int i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const S* xs = x.ptr() + o * n * inner + in;
      S* ys = y.ptr() + o * n * inner + in;
      S mx = xs[0];
      for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xs[i * inner]);
      S denom = S(0);
      for (std::int64_t i = 0; i < n; ++i) {
        const S e = std::exp(xs[i * inner] - mx);
        ys[i * inner] = e;
        denom += e;
      }
      for (std::int64_t i = 0; i < n; ++i) ys[i * inner] /= denom;
    }
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y, outer, n, inner]() mutable {
      if (!y.has_grad()) return;
      const S* gy = y.grad_view().data();
      auto& gx = x.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          S dot = S(0);
          for (std::int64_t i = 0; i < n; ++i)
            dot += gy[base + i * inner] * y.ptr()[base + i * inner];
          for (std::int64_t i = 0; i < n; ++i)
            gx[static_cast<std::size_t>(base + i * inner)] +=
                y.ptr()[base + i * inner] * (gy[base + i * inner] - dot);
        }
    });
  }
  return y;
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, int axis = -1) {
  const int ax = detail::normalize_axis(axis, x.rank());
  const std::int64_t n = x.dim(ax);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(i);
  for (int i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const S* xs = x.ptr() + o * n * inner + in;
      S* ys = y.ptr() + o * n * inner + in;
      S mx = xs[0];
      for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xs[i * inner]);
      S denom = S(0);
      for (std::int64_t i = 0; i < n; ++i) denom += std::exp(xs[i * inner] - mx);
      const S lse = mx + std::log(denom);
      for (std::int64_t i = 0; i < n; ++i) ys[i * inner] = xs[i * inner] - lse;
    }
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y, outer, n, inner]() mutable {
      if (!y.has_grad()) return;
      const S* gy = y.grad_view().data();
      auto& gx = x.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          S total = S(0);
          for (std::int64_t i = 0; i < n; ++i) total += gy[base + i * inner];
          for (std::int64_t i = 0; i < n; ++i)
            gx[static_cast<std::size_t>(base + i * inner)] +=
                gy[base + i * inner] - std::exp(y.ptr()[base + i * inner]) * total;
        }
    });
  }
  return y;
}

// Mean over the batch of -log softmax(logits)[label]; fused for stability.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimError("cross_entropy: logits must be [B, C]");
  const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != batch)
    throw DimError("cross_entropy: label count mismatch");
  for (int lb : labels)
    if (lb < 0 || lb >= classes) throw ContractError("cross_entropy: label out of range");
  S acc = S(0);
  for (std::int64_t b = 0; b < batch; ++b) {
    const S* z = logits.ptr() + b * classes;
    S mx = z[0];
    for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, z[c]);
    S denom = S(0);
    for (std::int64_t c = 0; c < classes; ++c) denom += std::exp(z[c] - mx);
    acc += (mx + std::log(denom)) - z[labels[static_cast<std::size_t>(b)]];
  }
  Tensor<S> y = Tensor<S>::scalar(acc / static_cast<S>(batch));
  if (tracking(logits)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([logits, labels, y, batch, classes]() mutable {
      if (!y.has_grad()) return;
      const S g = y.grad_view()[0] / static_cast<S>(batch);
      auto& gx = logits.grad();
      for (std::int64_t b = 0; b < batch; ++b) {
        const S* z = logits.ptr() + b * classes;
        S mx = z[0];
        for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, z[c]);
        S denom = S(0);
        for (std::int64_t c = 0; c < classes; ++c) denom += std::exp(z[c] - mx);
        for (std::int64_t c = 0; c < classes; ++c) {
          S p = std::exp(z[c] - mx) / denom;
          if (c == labels[static_cast<std::size_t>(b)]) p -= S(1);
          gx[static_cast<std::size_t>(b * classes + c)] += g * p;
        }
      }
    });
  }
  return y;
}

// KL(p || q) from log q and p, reduced as mean over the batch of per-row sums.
template <typename S>
Tensor<S> kl_div(const Tensor<S>& log_probs, const Tensor<S>& probs) {
  detail::expect_same_shape(log_probs, probs, "kl_div");
  if (log_probs.rank() != 2) throw DimError("kl_div: inputs must be [B, C]");
  const std::int64_t batch = log_probs.dim(0), classes = log_probs.dim(1);
  S acc = S(0);
  for (std::int64_t i = 0; i < batch * classes; ++i) {
    const S p = probs.ptr()[i];
    if (p > S(0)) acc += p * (std::log(p) - log_probs.ptr()[i]);
  }
  Tensor<S> y = Tensor<S>::scalar(acc / static_cast<S>(batch));
  if (tracking(log_probs) || tracking(probs)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([log_probs, probs, y, batch, classes]() mutable {
      if (!y.has_grad()) return;
      const S g = y.grad_view()[0] / static_cast<S>(batch);
      const std::int64_t n = batch * classes;
      if (log_probs.requires_grad()) {
        auto& gl = log_probs.grad();
        for (std::int64_t i = 0; i < n; ++i) gl[static_cast<std::size_t>(i)] -= g * probs.ptr()[i];
      }
      if (probs.requires_grad()) {
        auto& gp = probs.grad();
        for (std::int64_t i = 0; i < n; ++i) {
          const S p = probs.ptr()[i];
          if (p > S(0))
            gp[static_cast<std::size_t>(i)] +=
                g * (std::log(p) + S(1) - log_probs.ptr()[i]);
        }
      }
    });
  }
  return y;
}

}  // namespace nnc
