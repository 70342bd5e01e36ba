#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>

#include "mtn/tensor.hpp"

namespace mtn {

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
};

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-3;
  // 0 checks every coordinate; otherwise a random subset of this size.
  int max_coords = 0;
};

/// Central-difference check of an analytic gradient of a scalar function.
/// The relative-error denominator is floored at 1e-4 so coordinates whose
/// true gradient is far below the difference-quotient noise floor cannot
/// produce spurious failures.
inline GradCheckReport finite_diff_check(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& at, const Eigen::VectorXd& analytic_grad,
    const GradCheckOptions& opts = {}, std::mt19937* rng = nullptr) {
  require(at.size() == analytic_grad.size(), "finite_diff_check: gradient size mismatch");
  std::vector<Eigen::Index> coords(static_cast<std::size_t>(at.size()));
  std::iota(coords.begin(), coords.end(), Eigen::Index(0));
  if (opts.max_coords > 0 && static_cast<Eigen::Index>(opts.max_coords) < at.size()) {
    std::mt19937 fallback(12345);
    std::shuffle(coords.begin(), coords.end(), rng ? *rng : fallback);
    coords.resize(static_cast<std::size_t>(opts.max_coords));
  }

  GradCheckReport report;
  Eigen::VectorXd probe = at;
  for (Eigen::Index i : coords) {
    const double saved = probe[i];
    probe[i] = saved + opts.step;
    const double up = f(probe);
    probe[i] = saved - opts.step;
    const double down = f(probe);
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double analytic = analytic_grad[i];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-4});
    report.max_rel_err = std::max(report.max_rel_err, std::abs(numeric - analytic) / denom);
  }
  report.pass = report.max_rel_err <= opts.tolerance;
  return report;
}

/// A differentiable tensor map bundled with its input pullback, checked
/// against finite differences of the weighted output sum.
template <typename S>
struct DifferentiableOp {
  std::function<Tensor4<S>(const Tensor4<S>&)> forward;
  // (input, grad_out) -> grad_input
  std::function<Tensor4<S>(const Tensor4<S>&, const Tensor4<S>&)> backward;
};

inline GradCheckReport finite_diff_check(const DifferentiableOp<double>& op,
                                         const Tensor4d& input, double tolerance,
                                         std::mt19937& rng,
                                         int max_coords = 0) {
  Tensor4d probe_weights = zeros_like(op.forward(input));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (Eigen::Index i = 0; i < probe_weights.data.size(); ++i) probe_weights.data[i] = unit(rng);

  const auto scalar_fn = [&](const Eigen::VectorXd& flat) {
    Tensor4d x = input;
    x.data = flat.array();
    return (op.forward(x).data * probe_weights.data).sum();
  };
  const Tensor4d analytic = op.backward(input, probe_weights);
  GradCheckOptions opts;
  opts.tolerance = tolerance;
  opts.max_coords = max_coords;
  return finite_diff_check(scalar_fn, input.data.matrix(), analytic.data.matrix(), opts, &rng);
}

}  // namespace mtn
