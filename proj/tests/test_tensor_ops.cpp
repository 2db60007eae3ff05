#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "nnc/conv.hpp"
#include "nnc/gradcheck.hpp"
#include "nnc/ops.hpp"
#include "nnc/tensor.hpp"

using nnc::Tensor;

namespace {

template <typename S>
Tensor<S> randn(nnc::Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (auto& v : t.data()) v = static_cast<S>(dist(rng));
  return t;
}

// Direct six-nested-loop convolution, the independent oracle for conv2d.
template <typename S>
Tensor<S> conv_oracle(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                      std::int64_t stride, std::int64_t pad, std::int64_t groups) {
  const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  const std::int64_t Ho = (H + 2 * pad - Kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - Kw) / stride + 1;
  const std::int64_t cing = Cin / groups, coutg = Cout / groups;
  Tensor<S> y = Tensor<S>::zeros({B, Cout, Ho, Wo});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t co = 0; co < Cout; ++co) {
      const std::int64_t g = co / coutg;
      for (std::int64_t oi = 0; oi < Ho; ++oi)
        for (std::int64_t oj = 0; oj < Wo; ++oj) {
          double acc = bias.defined() ? static_cast<double>(bias.ptr()[co]) : 0.0;
          for (std::int64_t ci = 0; ci < cing; ++ci)
            for (std::int64_t ki = 0; ki < Kh; ++ki)
              for (std::int64_t kj = 0; kj < Kw; ++kj) {
                const std::int64_t ii = oi * stride - pad + ki;
                const std::int64_t jj = oj * stride - pad + kj;
                if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                acc += static_cast<double>(
                           x.ptr()[((b * Cin + g * cing + ci) * H + ii) * W + jj]) *
                       static_cast<double>(w.ptr()[((co * cing + ci) * Kh + ki) * Kw + kj]);
              }
          y.ptr()[((b * Cout + co) * Ho + oi) * Wo + oj] = static_cast<S>(acc);
        }
    }
  return y;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.ptr()[i]) - static_cast<double>(b.ptr()[i])));
  return m;
}

// sum(t * r) with fixed random r, for scalarizing vector-valued outputs.
template <typename S>
Tensor<S> dot_with(const Tensor<S>& t, const Tensor<S>& r) {
  return nnc::sum(nnc::mul(t, r));
}

}  // namespace

TEST_CASE("conv2d ones kernel sums the window") {
  auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  auto w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  auto y = nnc::conv2d(x, w);
  CHECK(y.shape() == nnc::Shape{1, 1, 1, 1});
  CHECK(y.data()[0] == doctest::Approx(9.0f));
}

TEST_CASE("conv2d identity kernel reproduces the input") {
  auto x = randn<float>({2, 3, 5, 5}, 7);
  auto w = Tensor<float>::zeros({3, 3, 3, 3});
  for (int c = 0; c < 3; ++c) w.ptr()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0f;
  auto y = nnc::conv2d(x, w, {}, 1, 1);
  CHECK(max_abs_diff(y, x) == doctest::Approx(0.0));
}

TEST_CASE("conv2d matches the loop oracle") {
  auto x = randn<float>({2, 4, 8, 8}, 11);
  auto w = randn<float>({6, 4, 3, 3}, 13);
  auto b = randn<float>({6}, 17);
  for (std::int64_t stride : {1, 2})
    for (std::int64_t pad : {0, 1, 3}) {
      auto got = nnc::conv2d(x, w, b, stride, pad, 1);
      auto want = conv_oracle(x, w, b, stride, pad, 1);
      CHECK(max_abs_diff(got, want) < 1e-5);
    }
}

TEST_CASE("conv2d grouped and depthwise match the loop oracle") {
  const std::int64_t cin = 4;
  auto x = randn<float>({2, cin, 6, 6}, 19);
  for (std::int64_t groups : {std::int64_t(2), cin}) {
    auto w = randn<float>({8, cin / groups, 3, 3}, 23 + groups);
    for (std::int64_t stride : {1, 2})
      for (std::int64_t pad : {0, 1}) {
        auto got = nnc::conv2d(x, w, {}, stride, pad, groups);
        auto want = conv_oracle(x, w, Tensor<float>{}, stride, pad, groups);
        CHECK(max_abs_diff(got, want) < 1e-5);
      }
  }
}

TEST_CASE("conv2d rejects bad geometry") {
  auto x = Tensor<float>::zeros({1, 4, 8, 8});
  CHECK_THROWS_AS(nnc::conv2d(x, Tensor<float>::zeros({6, 3, 3, 3})), nnc::DimError);
  CHECK_THROWS_AS(nnc::conv2d(x, Tensor<float>::zeros({6, 4, 3, 3}), {}, 1, 0, 3),
                  nnc::ConfigError);
  CHECK_THROWS_AS(nnc::conv2d(x, Tensor<float>::zeros({6, 4, 11, 11})), nnc::DimError);
}

TEST_CASE("unfold with K=1 flattens") {
  auto x = Tensor<float>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = nnc::unfold(x, 1);
  CHECK(y.shape() == nnc::Shape{1, 1, 4});
  CHECK(y.data() == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("unfold padding semantics") {
  auto x = randn<float>({1, 1, 3, 3}, 29);
  auto y = nnc::unfold(x, 3, 1, 1);
  CHECK(y.shape() == nnc::Shape{1, 9, 9});
  // column 4 is the center output position: the full 3x3 patch
  for (int k = 0; k < 9; ++k) CHECK(y.ptr()[k * 9 + 4] == doctest::Approx(x.ptr()[k]));
  // column 0 (top-left position): kernel offset (0,0) falls in padding
  CHECK(y.ptr()[0 * 9 + 0] == doctest::Approx(0.0f));
  CHECK(y.ptr()[8 * 9 + 0] == doctest::Approx(x.ptr()[4]));
  CHECK_THROWS_AS(nnc::unfold(x, 7, 1, 1), nnc::DimError);
}

TEST_CASE("im2col equivalence: conv2d == matmul(reshape(w), unfold(x))") {
  const std::int64_t cin = 4;
  auto x = randn<float>({1, cin, 7, 7}, 31);
  for (std::int64_t groups : {std::int64_t(1), std::int64_t(2), cin})
    for (std::int64_t stride : {1, 2})
      for (std::int64_t pad : {0, 1, 3}) {
        auto w = randn<float>({4, cin / groups, 3, 3}, 100 + groups);
        auto direct = nnc::conv2d(x, w, {}, stride, pad, groups);
        const std::int64_t cing = cin / groups, coutg = 4 / groups;
        const std::int64_t l = direct.dim(2) * direct.dim(3);
        auto cols = nnc::unfold(x, 3, stride, pad);
        for (std::int64_t g = 0; g < groups; ++g) {
          auto wg = Tensor<float>::from(
              {coutg, cing * 9},
              std::vector<float>(w.ptr() + g * coutg * cing * 9,
                                 w.ptr() + (g + 1) * coutg * cing * 9));
          auto cg = Tensor<float>::from(
              {cing * 9, l}, std::vector<float>(cols.ptr() + g * cing * 9 * l,
                                                cols.ptr() + (g + 1) * cing * 9 * l));
          auto yg = nnc::matmul(wg, cg);
          for (std::int64_t i = 0; i < coutg * l; ++i)
            CHECK(std::abs(yg.ptr()[i] - direct.ptr()[g * coutg * l + i]) < 1e-5);
        }
      }
}

TEST_CASE("softmax basics") {
  auto y = nnc::softmax(Tensor<float>::from({2}, {0, 0}), 0);
  CHECK(y.data()[0] == doctest::Approx(0.5f));
  CHECK(y.data()[1] == doctest::Approx(0.5f));

  auto big = nnc::softmax(Tensor<float>::from({2}, {1000.0f, 1000.5f}), 0);
  CHECK(std::isfinite(big.data()[0]));
  CHECK(std::isfinite(big.data()[1]));

  auto two = nnc::softmax(Tensor<double>::from({2}, {2, 0}), 0);
  CHECK(two.data()[0] == doctest::Approx(0.880797).epsilon(1e-4));
  CHECK(two.data()[1] == doctest::Approx(0.119203).epsilon(1e-4));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  auto x = randn<double>({5, 7}, 37, 3.0);
  auto p = nnc::softmax(x, 1);
  for (int b = 0; b < 5; ++b) {
    double s = 0;
    for (int c = 0; c < 7; ++c) s += p.ptr()[b * 7 + c];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  auto shifted = x.clone();
  for (auto& v : shifted.data()) v += 123.25;
  CHECK(max_abs_diff(nnc::softmax(shifted, 1), p) < 1e-6);
}

TEST_CASE("backward: sum gives ones, sum of squares gives 2x") {
  auto x = randn<float>({3, 4}, 41);
  x.set_requires_grad(true);
  nnc::backward(nnc::sum(x));
  for (auto g : x.grad()) CHECK(g == doctest::Approx(1.0f));

  x.zero_grad();
  nnc::backward(nnc::sum(nnc::mul(x, x)));
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(x.grad()[static_cast<std::size_t>(i)] == doctest::Approx(2 * x.ptr()[i]));
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = randn<float>({3}, 43);
  x.set_requires_grad(true);
  auto y = nnc::mul(x, x);
  CHECK_THROWS_AS(nnc::backward(y), nnc::ContractError);
  nnc::Tape<float>::active().clear();
}

TEST_CASE("grad accumulation is additive across consumers") {
  auto x = randn<double>({4}, 47);
  auto r1 = randn<double>({4}, 48);
  auto r2 = randn<double>({4}, 49);

  x.set_requires_grad(true);
  nnc::backward(nnc::add(dot_with(nnc::relu(x), r1), dot_with(nnc::mul(x, x), r2)));
  auto both = x.grad();

  x.zero_grad();
  nnc::backward(dot_with(nnc::relu(x), r1));
  auto first = x.grad();
  x.zero_grad();
  nnc::backward(dot_with(nnc::mul(x, x), r2));
  auto second = x.grad();

  for (std::size_t i = 0; i < both.size(); ++i)
    CHECK(both[i] == doctest::Approx(first[i] + second[i]).epsilon(1e-12));
}

TEST_CASE("concat backward splits grads exactly") {
  auto a = randn<double>({2, 3, 4, 4}, 53);
  auto b = randn<double>({2, 2, 4, 4}, 59);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto y = nnc::concat_channels(a, b);
  auto r = randn<double>(y.shape(), 61);
  nnc::backward(dot_with(y, r));
  for (std::int64_t n = 0; n < 2; ++n) {
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 16; ++i)
        CHECK(a.grad()[static_cast<std::size_t>((n * 3 + c) * 16 + i)] ==
              doctest::Approx(r.ptr()[(n * 5 + c) * 16 + i]));
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t i = 0; i < 16; ++i)
        CHECK(b.grad()[static_cast<std::size_t>((n * 2 + c) * 16 + i)] ==
              doctest::Approx(r.ptr()[(n * 5 + 3 + c) * 16 + i]));
  }
}

TEST_CASE("grad_check: analytic cases and negative control") {
  auto x = randn<double>({3, 3}, 67);
  auto report = nnc::grad_check<double>(
      [](const Tensor<double>& t) { return nnc::sum(nnc::mul(t, t)); }, x);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-8);

  // clone() detaches, so the analytic grad is x instead of 2x: must fail
  auto bad = nnc::grad_check<double>(
      [](const Tensor<double>& t) { return nnc::sum(nnc::mul(t, t.clone())); }, x);
  CHECK_FALSE(bad.pass);
}

TEST_CASE("gradient check: elementwise and activations") {
  auto x = randn<double>({2, 5}, 71);
  auto r = randn<double>({2, 5}, 72);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::relu(t), r); }, x)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::relu6(nnc::scale(t, 3.0)), r); },
            x)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::sigmoid(t), r); }, x)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::silu(t), r); }, x)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::softmax(t, 1), r); }, x)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::log_softmax(t, 1), r); }, x)
            .pass);
}

TEST_CASE("gradient check: matmul and linear") {
  auto a = randn<double>({3, 4}, 73);
  auto b = randn<double>({4, 5}, 74);
  auto r = randn<double>({3, 5}, 75);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::matmul(t, b), r); }, a)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::matmul(a, t), r); }, b)
            .pass);

  auto x = randn<double>({3, 4}, 76);
  auto w = randn<double>({5, 4}, 77);
  auto bias = randn<double>({5}, 78);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::linear(t, w, bias), r); }, x)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::linear(x, t, bias), r); }, w)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::linear(x, w, t), r); }, bias)
            .pass);
}

TEST_CASE("gradient check: conv2d including grouped and depthwise") {
  for (std::int64_t groups : {std::int64_t(1), std::int64_t(2), std::int64_t(4)}) {
    auto x = randn<double>({2, 4, 6, 6}, 80 + groups);
    auto w = randn<double>({4, 4 / groups, 3, 3}, 90 + groups);
    auto b = randn<double>({4}, 95 + groups);
    Tensor<double> r;
    {
      nnc::autograd::NoGradGuard ng;
      r = randn<double>(nnc::conv2d(x, w, b, 2, 1, groups).shape(), 99);
    }
    CHECK(nnc::grad_check<double>(
              [&](const Tensor<double>& t) {
                return dot_with(nnc::conv2d(t, w, b, 2, 1, groups), r);
              },
              x)
              .pass);
    CHECK(nnc::grad_check<double>(
              [&](const Tensor<double>& t) {
                return dot_with(nnc::conv2d(x, t, b, 2, 1, groups), r);
              },
              w)
              .pass);
    CHECK(nnc::grad_check<double>(
              [&](const Tensor<double>& t) {
                return dot_with(nnc::conv2d(x, w, t, 2, 1, groups), r);
              },
              b)
              .pass);
  }
}

TEST_CASE("gradient check: pooling and unfold") {
  auto x = randn<double>({2, 3, 6, 6}, 101);
  auto r1 = randn<double>({2, 3, 3, 3}, 102);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::maxpool2d(t, 2, 2), r1); }, x)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::avgpool2d(t, 2, 2), r1); }, x)
            .pass);
  auto r2 = randn<double>({2, 3}, 103);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::global_avg_pool(t), r2); }, x)
            .pass);
  auto r3 = randn<double>({2, 3, 4, 4}, 104);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) {
              return dot_with(nnc::adaptive_avg_pool2d(t, 4, 4), r3);
            },
            x)
            .pass);
  Tensor<double> r4;
  {
    nnc::autograd::NoGradGuard ng;
    r4 = randn<double>(nnc::unfold(x, 3, 1, 1).shape(), 105);
  }
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::unfold(t, 3, 1, 1), r4); }, x)
            .pass);
}

TEST_CASE("batchnorm2d eval identity stats and train statistics") {
  auto x = randn<float>({4, 3, 5, 5}, 107);
  auto gamma = Tensor<float>::full({3}, 1.0f);
  auto beta = Tensor<float>::zeros({3});
  auto rm = Tensor<float>::zeros({3});
  auto rv = Tensor<float>::full({3}, 1.0f);
  auto y = nnc::batchnorm2d(x, gamma, beta, rm, rv, /*training=*/false);
  CHECK(max_abs_diff(y, x) < 1e-5);

  auto yt = nnc::batchnorm2d(x, gamma, beta, rm, rv, /*training=*/true);
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) m += yt.ptr()[(n * 3 + c) * 25 + i];
    m /= 100;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        double d = yt.ptr()[(n * 3 + c) * 25 + i] - m;
        v += d * d;
      }
    v /= 100;
    CHECK(std::abs(m) < 1e-5);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-2));
  }
  // running stats moved toward batch statistics
  CHECK(rm.data()[0] != doctest::Approx(0.0f));
}

TEST_CASE("gradient check: batchnorm2d train mode") {
  auto x = randn<double>({3, 2, 4, 4}, 109);
  auto gamma = randn<double>({2}, 110);
  auto beta = randn<double>({2}, 111);
  auto r = randn<double>({3, 2, 4, 4}, 112);
  auto run = [&](const Tensor<double>& xx, const Tensor<double>& g, const Tensor<double>& b) {
    auto rm = Tensor<double>::zeros({2});
    auto rv = Tensor<double>::full({2}, 1.0);
    return dot_with(nnc::batchnorm2d(xx, g, b, rm, rv, true), r);
  };
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return run(t, gamma, beta); }, x)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return run(x, t, beta); }, gamma)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return run(x, gamma, t); }, beta)
            .pass);
}

TEST_CASE("gradient check: composed conv -> BN -> ReLU -> linear -> CE graph") {
  auto x = randn<double>({2, 3, 6, 6}, 113);
  auto w = randn<double>({4, 3, 3, 3}, 114, 0.5);
  auto gamma = Tensor<double>::full({4}, 1.0);
  auto beta = Tensor<double>::zeros({4});
  auto lw = randn<double>({3, 4 * 9}, 115, 0.5);
  auto lb = randn<double>({3}, 116, 0.1);
  std::vector<int> labels{0, 2};
  auto net = [&](const Tensor<double>& cw) {
    auto rm = Tensor<double>::zeros({4});
    auto rv = Tensor<double>::full({4}, 1.0);
    auto h = nnc::conv2d(x, cw, {}, 2, 1);
    h = nnc::relu(nnc::batchnorm2d(h, gamma, beta, rm, rv, true));
    h = nnc::reshape(h, {2, 4 * 9});
    return nnc::cross_entropy(nnc::linear(h, lw, lb), labels);
  };
  auto report = nnc::grad_check<double>(net, w);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("cross entropy and kl_div values") {
  // CE of uniform logits over C classes is log(C)
  auto z = Tensor<double>::zeros({2, 4});
  CHECK(nnc::cross_entropy(z, {1, 3}).data()[0] == doctest::Approx(std::log(4.0)));

  // KL(p||p) == 0
  auto p = nnc::softmax(randn<double>({3, 5}, 117), 1);
  auto logp = nnc::log_softmax(randn<double>({3, 5}, 117), 1);
  CHECK(nnc::kl_div(logp, p).data()[0] == doctest::Approx(0.0).epsilon(1e-10));

  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return nnc::cross_entropy(t, {1, 3, 0}); },
            randn<double>({3, 5}, 118))
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return nnc::kl_div(nnc::log_softmax(t, 1), p); },
            randn<double>({3, 5}, 119))
            .pass);
}

TEST_CASE("channel_scale forward and gradient") {
  auto x = randn<double>({2, 3, 4, 4}, 120);
  auto s = randn<double>({2, 3}, 121);
  auto y = nnc::channel_scale(x, s);
  CHECK(y.ptr()[5] == doctest::Approx(x.ptr()[5] * s.ptr()[0]));
  auto r = randn<double>({2, 3, 4, 4}, 122);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::channel_scale(t, s), r); }, x)
            .pass);
  CHECK(nnc::grad_check<double>(
            [&](const Tensor<double>& t) { return dot_with(nnc::channel_scale(x, t), r); }, s)
            .pass);
}

TEST_CASE("eval-style op stack is deterministic") {
  nnc::autograd::NoGradGuard ng;
  auto x = randn<float>({1, 3, 8, 8}, 123);
  auto w = randn<float>({4, 3, 3, 3}, 124);
  auto a = nnc::conv2d(x, w, {}, 1, 1);
  auto b = nnc::conv2d(x, w, {}, 1, 1);
  CHECK(a.data() == b.data());
}
