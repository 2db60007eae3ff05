#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "nnc/tensor.hpp"

namespace nnc {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
};

// Compares the tape gradient of a scalar-valued function against central
// finite differences. Meant to run on double tensors; coordinates can be
// subsampled for large inputs (max_coords < 0 checks all of them).
template <typename S>
GradCheckReport grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, Tensor<S> x,
                           double h = 1e-5, double tolerance = 1e-4,
                           std::int64_t max_coords = -1, std::uint64_t seed = 0) {
  Tape<S>::active().clear();
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<S> y = f(x);
  if (y.numel() != 1) throw ContractError("grad_check: f must return a scalar");
  backward(y);
  std::vector<S> analytic = x.grad();
  x.zero_grad();
  x.set_requires_grad(false);

  std::vector<std::int64_t> coords(static_cast<std::size_t>(x.numel()));
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = static_cast<std::int64_t>(i);
  if (max_coords > 0 && max_coords < x.numel()) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(max_coords));
  }

  GradCheckReport report;
  {
    autograd::NoGradGuard ng;
    for (std::int64_t i : coords) {
      const S saved = x.data()[static_cast<std::size_t>(i)];
      x.data()[static_cast<std::size_t>(i)] = saved + static_cast<S>(h);
      const double fp = static_cast<double>(f(x).data()[0]);
      x.data()[static_cast<std::size_t>(i)] = saved - static_cast<S>(h);
      const double fm = static_cast<double>(f(x).data()[0]);
      x.data()[static_cast<std::size_t>(i)] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
      const double denom = std::max(1e-6, std::abs(a) + std::abs(numeric));
      report.max_rel_err = std::max(report.max_rel_err, std::abs(a - numeric) / denom);
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace nnc
