#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "nnc/ops.hpp"
#include "nnc/tensor.hpp"

namespace nnc {

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// One image: scatter [C,H,W] into columns [C*Kh*Kw, L], zero padding.
template <typename S>
void im2col(const S* img, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, S* cols) {
  const std::int64_t ho = conv_out_extent(h, kh, stride, pad);
  const std::int64_t wo = conv_out_extent(w, kw, stride, pad);
  const std::int64_t l = ho * wo;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        S* row = cols + ((ch * kh + ki) * kw + kj) * l;
        for (std::int64_t oi = 0; oi < ho; ++oi) {
          const std::int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) {
            std::fill_n(row + oi * wo, wo, S(0));
            continue;
          }
          const S* src = img + (ch * h + ii) * w;
          for (std::int64_t oj = 0; oj < wo; ++oj) {
            const std::int64_t jj = oj * stride - pad + kj;
            row[oi * wo + oj] = (jj < 0 || jj >= w) ? S(0) : src[jj];
          }
        }
      }
}

// Adjoint of im2col: accumulate columns back into the image.
template <typename S>
void col2im(const S* cols, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, S* img) {
  const std::int64_t ho = conv_out_extent(h, kh, stride, pad);
  const std::int64_t wo = conv_out_extent(w, kw, stride, pad);
  const std::int64_t l = ho * wo;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const S* row = cols + ((ch * kh + ki) * kw + kj) * l;
        for (std::int64_t oi = 0; oi < ho; ++oi) {
          const std::int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          S* dst = img + (ch * h + ii) * w;
          for (std::int64_t oj = 0; oj < wo; ++oj) {
            const std::int64_t jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) dst[jj] += row[oi * wo + oj];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: im2col + GEMM, grouped. weight [Cout, Cin/G, Kh, Kw].
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias = {},
                 std::int64_t stride = 1, std::int64_t pad = 0, std::int64_t groups = 1) {
  if (x.rank() != 4 || w.rank() != 4)
    throw DimError("conv2d: expected NCHW input and OIHW weight");
  const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (groups < 1 || cin % groups != 0 || cout % groups != 0)
    throw ConfigError("conv2d: groups " + std::to_string(groups) + " must divide Cin " +
                      std::to_string(cin) + " and Cout " + std::to_string(cout));
  if (w.dim(1) != cin / groups)
    throw DimError("conv2d: weight expects " + std::to_string(w.dim(1)) +
                   " input channels per group, input has " + std::to_string(cin / groups));
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw DimError("conv2d: kernel larger than padded input");
  if (bias.defined() && bias.numel() != cout) throw DimError("conv2d: bias length mismatch");

  const std::int64_t ho = conv_out_extent(h, kh, stride, pad);
  const std::int64_t wo = conv_out_extent(wd, kw, stride, pad);
  const std::int64_t l = ho * wo;
  const std::int64_t cing = cin / groups, coutg = cout / groups;
  const std::int64_t krows = cing * kh * kw;

  Tensor<S> y = Tensor<S>::zeros({batch, cout, ho, wo});
  std::vector<S> cols(static_cast<std::size_t>(cin * kh * kw * l));
  for (std::int64_t n = 0; n < batch; ++n) {
    detail::im2col(x.ptr() + n * cin * h * wd, cin, h, wd, kh, kw, stride, pad, cols.data());
    for (std::int64_t g = 0; g < groups; ++g) {
      ConstMatMap<S> wg(w.ptr() + g * coutg * krows, coutg, krows);
      ConstMatMap<S> cg(cols.data() + g * krows * l, krows, l);
      MatMap<S>(y.ptr() + (n * cout + g * coutg) * l, coutg, l).noalias() = wg * cg;
    }
    if (bias.defined()) {
      S* yr = y.ptr() + n * cout * l;
      for (std::int64_t c = 0; c < cout; ++c)
        for (std::int64_t i = 0; i < l; ++i) yr[c * l + i] += bias.ptr()[c];
    }
  }

  if (tracking(x) || tracking(w) || (bias.defined() && tracking(bias))) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, w, bias, y, stride, pad, groups]() mutable {
      if (!y.has_grad()) return;
      const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
      const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      const std::int64_t ho = y.dim(2), wo = y.dim(3), l = ho * wo;
      const std::int64_t cing = cin / groups, coutg = cout / groups;
      const std::int64_t krows = cing * kh * kw;
      const S* gy = y.grad_view().data();
      std::vector<S> cols(static_cast<std::size_t>(cin * kh * kw * l));
      std::vector<S> gcols(static_cast<std::size_t>(cin * kh * kw * l));
      const bool need_x = x.requires_grad();
      const bool need_w = w.requires_grad();
      for (std::int64_t n = 0; n < batch; ++n) {
        if (need_w)
          detail::im2col(x.ptr() + n * cin * h * wd, cin, h, wd, kh, kw, stride, pad, cols.data());
        for (std::int64_t g = 0; g < groups; ++g) {
          ConstMatMap<S> gyg(gy + (n * cout + g * coutg) * l, coutg, l);
          if (need_w)
            MatMap<S>(w.grad().data() + g * coutg * krows, coutg, krows).noalias() +=
                gyg * ConstMatMap<S>(cols.data() + g * krows * l, krows, l).transpose();
          if (need_x)
            MatMap<S>(gcols.data() + g * krows * l, krows, l).noalias() =
                ConstMatMap<S>(w.ptr() + g * coutg * krows, coutg, krows).transpose() * gyg;
        }
        if (need_x)
          detail::col2im(gcols.data(), cin, h, wd, kh, kw, stride, pad,
                         x.grad().data() + n * cin * h * wd);
      }
      if (bias.defined() && bias.requires_grad()) {
        auto& gb = bias.grad();
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t c = 0; c < cout; ++c) {
            S acc = S(0);
            const S* row = gy + (n * cout + c) * l;
            for (std::int64_t i = 0; i < l; ++i) acc += row[i];
            gb[static_cast<std::size_t>(c)] += acc;
          }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// unfold: [B,C,H,W] -> [B, C*K*K, L], column j holds the patch at position j.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> unfold(const Tensor<S>& x, std::int64_t k, std::int64_t stride = 1,
                 std::int64_t pad = 0) {
  if (x.rank() != 4) throw DimError("unfold: expected NCHW input");
  const std::int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h + 2 * pad < k || w + 2 * pad < k) throw DimError("unfold: kernel larger than padded input");
  const std::int64_t ho = conv_out_extent(h, k, stride, pad);
  const std::int64_t wo = conv_out_extent(w, k, stride, pad);
  const std::int64_t l = ho * wo, rows = c * k * k;
  Tensor<S> y = Tensor<S>::zeros({batch, rows, l});
  for (std::int64_t n = 0; n < batch; ++n)
    detail::im2col(x.ptr() + n * c * h * w, c, h, w, k, k, stride, pad, y.ptr() + n * rows * l);
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y, k, stride, pad]() mutable {
      if (!y.has_grad()) return;
      const std::int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
      const std::int64_t rows = y.dim(1), l = y.dim(2);
      for (std::int64_t n = 0; n < batch; ++n)
        detail::col2im(y.grad_view().data() + n * rows * l, c, h, w, k, k, stride, pad,
                       x.grad().data() + n * c * h * w);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x, std::int64_t k, std::int64_t stride,
                    std::int64_t pad = 0) {
  if (x.rank() != 4) throw DimError("maxpool2d: expected NCHW input");
  const std::int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h + 2 * pad < k || w + 2 * pad < k)
    throw DimError("maxpool2d: kernel larger than padded input");
  const std::int64_t ho = conv_out_extent(h, k, stride, pad);
  const std::int64_t wo = conv_out_extent(w, k, stride, pad);
  Tensor<S> y = Tensor<S>::zeros({batch, c, ho, wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.numel()));
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S* plane = x.ptr() + (n * c + ch) * h * w;
      for (std::int64_t oi = 0; oi < ho; ++oi)
        for (std::int64_t oj = 0; oj < wo; ++oj) {
          S best = -std::numeric_limits<S>::infinity();
          std::int64_t best_idx = -1;
          for (std::int64_t ki = 0; ki < k; ++ki) {
            const std::int64_t ii = oi * stride - pad + ki;
            if (ii < 0 || ii >= h) continue;
            for (std::int64_t kj = 0; kj < k; ++kj) {
              const std::int64_t jj = oj * stride - pad + kj;
              if (jj < 0 || jj >= w) continue;
              const S v = plane[ii * w + jj];
              if (v > best) {
                best = v;
                best_idx = ii * w + jj;
              }
            }
          }
          const std::int64_t oidx = ((n * c + ch) * ho + oi) * wo + oj;
          y.ptr()[oidx] = best;
          argmax[static_cast<std::size_t>(oidx)] = (n * c + ch) * h * w + best_idx;
        }
    }
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y, argmax = std::move(argmax)]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i)
        gx[static_cast<std::size_t>(argmax[i])] += gy[i];
    });
  }
  return y;
}

template <typename S>
Tensor<S> avgpool2d(const Tensor<S>& x, std::int64_t k, std::int64_t stride) {
  if (x.rank() != 4) throw DimError("avgpool2d: expected NCHW input");
  const std::int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < k || w < k) throw DimError("avgpool2d: kernel larger than input");
  const std::int64_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  const S inv = S(1) / static_cast<S>(k * k);
  Tensor<S> y = Tensor<S>::zeros({batch, c, ho, wo});
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S* plane = x.ptr() + (n * c + ch) * h * w;
      S* out = y.ptr() + (n * c + ch) * ho * wo;
      for (std::int64_t oi = 0; oi < ho; ++oi)
        for (std::int64_t oj = 0; oj < wo; ++oj) {
          S acc = S(0);
          for (std::int64_t ki = 0; ki < k; ++ki)
            for (std::int64_t kj = 0; kj < k; ++kj)
              acc += plane[(oi * stride + ki) * w + oj * stride + kj];
          out[oi * wo + oj] = acc * inv;
        }
    }
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y, k, stride, inv]() mutable {
      if (!y.has_grad()) return;
      const std::int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
      const std::int64_t ho = y.dim(2), wo = y.dim(3);
      const S* gy = y.grad_view().data();
      auto& gx = x.grad();
      for (std::int64_t n = 0; n < batch; ++n)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          S* gplane = gx.data() + (n * c + ch) * h * w;
          const S* grow = gy + (n * c + ch) * ho * wo;
          for (std::int64_t oi = 0; oi < ho; ++oi)
            for (std::int64_t oj = 0; oj < wo; ++oj) {
              const S g = grow[oi * wo + oj] * inv;
              for (std::int64_t ki = 0; ki < k; ++ki)
                for (std::int64_t kj = 0; kj < k; ++kj)
                  gplane[(oi * stride + ki) * w + oj * stride + kj] += g;
            }
        }
    });
  }
  return y;
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4) throw DimError("global_avg_pool: expected NCHW input");
  const std::int64_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const S inv = S(1) / static_cast<S>(hw);
  Tensor<S> y = Tensor<S>::zeros({batch, c});
  for (std::int64_t i = 0; i < batch * c; ++i) {
    const S* plane = x.ptr() + i * hw;
    S acc = S(0);
    for (std::int64_t j = 0; j < hw; ++j) acc += plane[j];
    y.ptr()[i] = acc * inv;
  }
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y, hw, inv]() mutable {
      if (!y.has_grad()) return;
      const auto& gy = y.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const S g = gy[i] * inv;
        S* gp = gx.data() + static_cast<std::int64_t>(i) * hw;
        for (std::int64_t j = 0; j < hw; ++j) gp[j] += g;
      }
    });
  }
  return y;
}

// Adaptive average pooling with the floor/ceil cell rule.
template <typename S>
Tensor<S> adaptive_avg_pool2d(const Tensor<S>& x, std::int64_t oh, std::int64_t ow) {
  if (x.rank() != 4) throw DimError("adaptive_avg_pool2d: expected NCHW input");
  const std::int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<S> y = Tensor<S>::zeros({batch, c, oh, ow});
  auto cell = [](std::int64_t i, std::int64_t in, std::int64_t out) {
    return std::pair<std::int64_t, std::int64_t>{(i * in) / out,
                                                 ((i + 1) * in + out - 1) / out};
  };
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S* plane = x.ptr() + (n * c + ch) * h * w;
      S* out = y.ptr() + (n * c + ch) * oh * ow;
      for (std::int64_t oi = 0; oi < oh; ++oi) {
        auto [i0, i1] = cell(oi, h, oh);
        for (std::int64_t oj = 0; oj < ow; ++oj) {
          auto [j0, j1] = cell(oj, w, ow);
          S acc = S(0);
          for (std::int64_t ii = i0; ii < i1; ++ii)
            for (std::int64_t jj = j0; jj < j1; ++jj) acc += plane[ii * w + jj];
          out[oi * ow + oj] = acc / static_cast<S>((i1 - i0) * (j1 - j0));
        }
      }
    }
  if (tracking(x)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([x, y, oh, ow, cell]() mutable {
      if (!y.has_grad()) return;
      const std::int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
      const S* gy = y.grad_view().data();
      auto& gx = x.grad();
      for (std::int64_t n = 0; n < batch; ++n)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          S* gplane = gx.data() + (n * c + ch) * h * w;
          const S* grow = gy + (n * c + ch) * oh * ow;
          for (std::int64_t oi = 0; oi < oh; ++oi) {
            auto [i0, i1] = cell(oi, h, oh);
            for (std::int64_t oj = 0; oj < ow; ++oj) {
              auto [j0, j1] = cell(oj, w, ow);
              const S g = grow[oi * ow + oj] / static_cast<S>((i1 - i0) * (j1 - j0));
              for (std::int64_t ii = i0; ii < i1; ++ii)
                for (std::int64_t jj = j0; jj < j1; ++jj) gplane[ii * w + jj] += g;
            }
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization (NCHW, per channel). Train mode uses batch statistics
// and updates running stats in place; eval mode reads running stats.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                      S momentum = S(0.1), S eps = S(1e-5)) {
  if (x.rank() != 4) throw DimError("batchnorm2d: expected NCHW input");
  const std::int64_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    throw DimError("batchnorm2d: affine/stat length must equal channel count");
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  const std::int64_t n_per_c = batch * hw;

  std::vector<S> mu(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
  if (training) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      S m = S(0);
      for (std::int64_t n = 0; n < batch; ++n) {
        const S* plane = x.ptr() + (n * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) m += plane[i];
      }
      m /= static_cast<S>(n_per_c);
      S var = S(0);
      for (std::int64_t n = 0; n < batch; ++n) {
        const S* plane = x.ptr() + (n * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const S d = plane[i] - m;
          var += d * d;
        }
      }
      var /= static_cast<S>(n_per_c);
      mu[static_cast<std::size_t>(ch)] = m;
      invstd[static_cast<std::size_t>(ch)] = S(1) / std::sqrt(var + eps);
      const S unbiased =
          n_per_c > 1 ? var * static_cast<S>(n_per_c) / static_cast<S>(n_per_c - 1) : var;
      running_mean.data()[static_cast<std::size_t>(ch)] =
          (S(1) - momentum) * running_mean.data()[static_cast<std::size_t>(ch)] + momentum * m;
      running_var.data()[static_cast<std::size_t>(ch)] =
          (S(1) - momentum) * running_var.data()[static_cast<std::size_t>(ch)] +
          momentum * unbiased;
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mu[static_cast<std::size_t>(ch)] = running_mean.ptr()[ch];
      invstd[static_cast<std::size_t>(ch)] = S(1) / std::sqrt(running_var.ptr()[ch] + eps);
    }
  }

  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S* xi = x.ptr() + (n * c + ch) * hw;
      S* yi = y.ptr() + (n * c + ch) * hw;
      const S m = mu[static_cast<std::size_t>(ch)], is = invstd[static_cast<std::size_t>(ch)];
      const S g = gamma.ptr()[ch], b = beta.ptr()[ch];
      for (std::int64_t i = 0; i < hw; ++i) yi[i] = (xi[i] - m) * is * g + b;
    }

  if (tracking(x) || tracking(gamma) || tracking(beta)) {
    y.set_requires_grad(true);
    Tape<S>::active().record(
        [x, gamma, beta, y, mu = std::move(mu), invstd = std::move(invstd), training]() mutable {
          if (!y.has_grad()) return;
          const std::int64_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
          const std::int64_t n_per_c = batch * hw;
          const S* gy = y.grad_view().data();
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const S m = mu[static_cast<std::size_t>(ch)];
            const S is = invstd[static_cast<std::size_t>(ch)];
            S sum_gy = S(0), sum_gy_xhat = S(0);
            for (std::int64_t n = 0; n < batch; ++n) {
              const S* xi = x.ptr() + (n * c + ch) * hw;
              const S* gi = gy + (n * c + ch) * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                sum_gy += gi[i];
                sum_gy_xhat += gi[i] * (xi[i] - m) * is;
              }
            }
            if (gamma.requires_grad()) gamma.grad()[static_cast<std::size_t>(ch)] += sum_gy_xhat;
            if (beta.requires_grad()) beta.grad()[static_cast<std::size_t>(ch)] += sum_gy;
            if (x.requires_grad()) {
              const S g = gamma.ptr()[ch];
              const S mean_gy = sum_gy / static_cast<S>(n_per_c);
              const S mean_gy_xhat = sum_gy_xhat / static_cast<S>(n_per_c);
              for (std::int64_t n = 0; n < batch; ++n) {
                const S* xi = x.ptr() + (n * c + ch) * hw;
                const S* gi = gy + (n * c + ch) * hw;
                S* gxi = x.grad().data() + (n * c + ch) * hw;
                if (training) {
                  for (std::int64_t i = 0; i < hw; ++i) {
                    const S xhat = (xi[i] - m) * is;
                    gxi[i] += g * is * (gi[i] - mean_gy - xhat * mean_gy_xhat);
                  }
                } else {
                  for (std::int64_t i = 0; i < hw; ++i) gxi[i] += g * is * gi[i];
                }
              }
            }
          }
        });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Involution application. patches: unfold output [B, C*K2, L] (channel-major,
// kernel position fastest); kernels: span output [B, G*K2, Ho, Wo] or
// [B, G*K2, L]. out[b,c,p] = sum_k kernels[b, g(c)*K2+k, p] * patches[b, c*K2+k, p].
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> involution_apply(const Tensor<S>& patches, const Tensor<S>& kernels,
                           std::int64_t groups, std::int64_t ho, std::int64_t wo) {
  if (patches.rank() != 3) throw DimError("involution_apply: patches must be [B, C*K2, L]");
  const std::int64_t batch = patches.dim(0), l = patches.dim(2);
  if (l != ho * wo) throw DimError("involution_apply: spatial extent mismatch");
  if (kernels.dim(0) != batch || kernels.numel() % (batch * l) != 0)
    throw DimError("involution_apply: kernel tensor incompatible with patches");
  const std::int64_t k2 = kernels.numel() / (batch * l * groups);
  if (patches.dim(1) % k2 != 0) throw DimError("involution_apply: patch rows not divisible by K2");
  const std::int64_t c = patches.dim(1) / k2;
  if (c % groups != 0) throw ConfigError("involution_apply: channels not divisible by groups");
  const std::int64_t cg = c / groups;

  Tensor<S> y = Tensor<S>::zeros({batch, c, ho, wo});
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t g = ch / cg;
      S* out = y.ptr() + (n * c + ch) * l;
      for (std::int64_t k = 0; k < k2; ++k) {
        const S* pr = patches.ptr() + (n * c * k2 + (ch * k2 + k)) * l;
        const S* kr = kernels.ptr() + (n * groups * k2 + (g * k2 + k)) * l;
        for (std::int64_t p = 0; p < l; ++p) out[p] += pr[p] * kr[p];
      }
    }

  if (tracking(patches) || tracking(kernels)) {
    y.set_requires_grad(true);
    Tape<S>::active().record([patches, kernels, y, groups, k2, c, cg, l]() mutable {
      if (!y.has_grad()) return;
      const std::int64_t batch = patches.dim(0);
      const S* gy = y.grad_view().data();
      for (std::int64_t n = 0; n < batch; ++n)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const std::int64_t g = ch / cg;
          const S* gout = gy + (n * c + ch) * l;
          for (std::int64_t k = 0; k < k2; ++k) {
            const std::int64_t pidx = (n * c * k2 + (ch * k2 + k)) * l;
            const std::int64_t kidx = (n * groups * k2 + (g * k2 + k)) * l;
            if (patches.requires_grad()) {
              S* gp = patches.grad().data() + pidx;
              const S* kr = kernels.ptr() + kidx;
              for (std::int64_t p = 0; p < l; ++p) gp[p] += gout[p] * kr[p];
            }
            if (kernels.requires_grad()) {
              S* gk = kernels.grad().data() + kidx;
              const S* pr = patches.ptr() + pidx;
              for (std::int64_t p = 0; p < l; ++p) gk[p] += gout[p] * pr[p];
            }
          }
        }
    });
  }
  return y;
}

}  // namespace nnc
