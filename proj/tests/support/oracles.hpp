#pragma once

// Independent oracles used by the unit and acceptance suites. Nothing here
// calls into the code path it is used to check.

#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "beatkit/tensor.hpp"

namespace beatkit::testing {

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst_abs = 0.0;
  double worst_rel = 0.0;
  std::string worst_where;
};

// Compares autodiff gradients of every entry of `params` with central finite
// differences of `loss_fn`. An entry passes when the relative error is within
// `rel_tol` or the absolute error within `abs_floor`.
inline GradCheckReport check_gradients(const std::vector<std::pair<std::string, Tensor>>& params,
                                       const std::function<Tensor()>& loss_fn, double step = 1e-4,
                                       double rel_tol = 1e-4, double abs_floor = 1e-6) {
  for (auto [name, p] : params) p.zero_grad();
  Tape::active().clear();
  backward(loss_fn());

  GradCheckReport report;
  NoGradGuard guard;
  for (auto [name, p] : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double saved = p.data()[i];
      p.mutable_data()[i] = saved + step;
      const double up = loss_fn().item();
      p.mutable_data()[i] = saved - step;
      const double down = loss_fn().item();
      p.mutable_data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-300});
      ++report.checked;
      const bool ok = rel_err <= rel_tol || abs_err <= abs_floor;
      if (!ok) ++report.failures;
      if (!ok && rel_err > report.worst_rel) {
        report.worst_rel = rel_err;
        report.worst_abs = abs_err;
        char buf[96];
        std::snprintf(buf, sizeof buf, "] analytic=%.6e numeric=%.6e", a, numeric);
        report.worst_where = name + "[" + std::to_string(i) + buf;
      }
    }
  }
  return report;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::uniform(std::move(shape), lo, hi, rng);
  t.set_requires_grad(grad);
  return t;
}

// Keys reachable from query i under window [-m, n] with dilation r, by direct
// enumeration of j = i + r*k.
inline std::vector<std::size_t> attainable_set(std::size_t i, std::size_t T, std::size_t r, std::size_t m,
                                               std::size_t n) {
  std::vector<std::size_t> out;
  for (long k = -static_cast<long>(m); k <= static_cast<long>(n); ++k) {
    const long j = static_cast<long>(i) + static_cast<long>(r) * k;
    if (j >= 0 && j < static_cast<long>(T)) out.push_back(static_cast<std::size_t>(j));
  }
  return out;
}

// Frames reachable backwards through stacked dilated windows, by breadth-first
// expansion of the layered connectivity graph.
inline std::set<long> ancestry(long frame, const std::vector<std::tuple<long, long, long>>& layers /* m, n, r */) {
  std::set<long> frontier{frame};
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    const auto [m, n, r] = *it;
    std::set<long> next;
    for (long f : frontier)
      for (long k = -m; k <= n; ++k) next.insert(f + r * k);
    frontier = std::move(next);
  }
  return frontier;
}

}  // namespace beatkit::testing
