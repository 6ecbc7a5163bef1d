#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <vector>

#include "fastgp/types.hpp"

namespace fastgp {

struct OptimizeConfig {
  int max_iters = 100;
  double grad_tol = 1e-5;
  double step_tol = 1e-10;
  bool use_finite_diff = false;
  double fd_step = 1e-5;

  void validate() const {
    if (max_iters < 1) throw ShapeError("OptimizeConfig: max_iters must be >= 1");
    if (!(grad_tol > 0) || !(step_tol > 0) || !(fd_step > 0))
      throw ShapeError("OptimizeConfig: tolerances must be positive");
  }
};

struct TraceRow {
  int iter = 0;
  double value = 0;
  double grad_norm = 0;
  double step = 0;
};

struct OptimizeResult {
  Vector theta;
  double value = 0;
  std::vector<TraceRow> trace;
};

using Objective = std::function<double(const Vector&)>;
using Gradient = std::function<Vector(const Vector&)>;

inline Vector finite_diff_grad(const Objective& f, const Vector& theta, double h) {
  Vector g(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    Vector tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    g[i] = (f(tp) - f(tm)) / (2 * h);
  }
  return g;
}

/// Gradient descent with backtracking line search in log-parameter
/// space. The objective trace is monotone non-increasing by contract.
inline OptimizeResult minimize_nlml(const Objective& objective,
                                    std::optional<Gradient> gradient, Vector theta0,
                                    const OptimizeConfig& cfg = {}) {
  cfg.validate();
  OptimizeResult res;
  res.theta = std::move(theta0);
  res.value = objective(res.theta);
  if (!std::isfinite(res.value))
    throw OptimizationError("minimize_nlml: objective non-finite at theta0");

  auto grad = [&](const Vector& th) {
    if (gradient && !cfg.use_finite_diff) return (*gradient)(th);
    return finite_diff_grad(objective, th, cfg.fd_step);
  };

  double step = 1.0;
  for (int it = 0; it < cfg.max_iters; ++it) {
    Vector g = grad(res.theta);
    const double gnorm = g.norm();
    res.trace.push_back({it, res.value, gnorm, step});
    if (gnorm <= cfg.grad_tol) break;

    bool improved = false;
    for (int bt = 0; bt < 40; ++bt) {
      Vector cand = res.theta - (step / gnorm) * g;
      const double fc = objective(cand);
      if (std::isfinite(fc) && fc < res.value) {
        res.theta = std::move(cand);
        res.value = fc;
        step *= 1.5;
        improved = true;
        break;
      }
      step *= 0.5;
      if (step < cfg.step_tol) break;
    }
    if (!improved) {
      if (!std::isfinite(objective(res.theta)))
        throw OptimizationError("minimize_nlml: no finite point found in line search");
      break;  // step collapsed below tolerance
    }
    if (step < cfg.step_tol) break;
  }
  return res;
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "iteration,objective,grad_norm,step\n";
  for (const TraceRow& r : trace)
    os << r.iter << ',' << r.value << ',' << r.grad_norm << ',' << r.step << '\n';
}

}  // namespace fastgp
