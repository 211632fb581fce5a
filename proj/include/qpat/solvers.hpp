#pragma once

// Classical iterative solvers over an abstract Objective: gradient descent,
// Gauss-Newton, and safeguarded SR1, all sharing one loop with a bisection
// line search (start at beta = 1, halve until the value decreases, at most
// 12 halvings, accept the first decrease).
//
// Termination: gradient norm <= 1e-9 (1 + |E0|), max 50 iterations, or three
// consecutive failed line searches ("stalled"). The TV variant is Gauss-
// Newton with the lagged-diffusivity Hessian supplied by the objective.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qpat/common.hpp"
#include "qpat/objective.hpp"

namespace qpat {

using Eigen::MatrixXd;

struct TraceRow {
  int iteration = 0;
  double objective = 0;
  double beta = 0;
  double grad_norm = 0;
  double rel_err_mua = std::numeric_limits<double>::quiet_NaN();
  double rel_err_mus = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0;
};

struct SolverTrace {
  std::vector<TraceRow> rows;
  std::string termination;
  int sr1_skipped_updates = 0;

  void to_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("trace: cannot write " + path);
    out << "iteration,objective,beta,grad_norm,rel_err_mua,rel_err_mus,seconds\n";
    out.precision(12);
    for (const auto& r : rows)
      out << r.iteration << ',' << r.objective << ',' << r.beta << ','
          << r.grad_norm << ',' << r.rel_err_mua << ',' << r.rel_err_mus << ','
          << r.seconds << '\n';
  }
};

// relative error convention used everywhere results are reported:
// mean_t |est_t - true_t| / mean_t true_t
inline double relative_error(const VectorXd& est, const VectorXd& truth) {
  if (est.size() != truth.size())
    throw std::invalid_argument("relative_error: length mismatch");
  return (est - truth).cwiseAbs().mean() / truth.mean();
}

struct SolveOptions {
  int max_iterations = 50;
  double grad_tol_scale = 1e-9;  // tolerance = scale * (1 + |E0|)
  int max_bisections = 12;
  int max_failed_searches = 3;
  double sr1_omega = 1e-8;
  double sr1_h0_scale = 1.0;  // H0 = scale * I
  bool use_exact_step = false;
  // truth in physical space (2P) for the trace's error columns
  VectorXd truth;
  // maps solver-space u to physical x for error reporting; identity default
  std::function<VectorXd(const VectorXd&)> to_physical;
};

struct SolveResult {
  VectorXd u;
  SolverTrace trace;
  MatrixXd sr1_h;  // final inverse-Hessian approximation (SR1 only)
};

// SR1 inverse-Hessian rank-1 update with the standard safeguard: skip when
// |y^T (s - H y)| < omega |y| |s - H y| (or the correction is degenerate)
inline bool sr1_update(MatrixXd& H, const VectorXd& s, const VectorXd& y,
                       double omega) {
  const VectorXd r = s - H * y;
  const double rn = r.norm();
  const double denom = y.dot(r);
  if (rn == 0.0 || !std::isfinite(denom) ||
      std::abs(denom) < omega * y.norm() * rn)
    return false;
  const MatrixXd upd = (r * r.transpose()) / denom;
  if (!upd.allFinite()) return false;
  H += upd;
  return true;
}

enum class StepEngine { GD, GN, SR1 };

inline SolveResult solve_loop(Objective& obj, VectorXd u,
                              const SolveOptions& opts, StepEngine engine) {
  const auto t0 = std::chrono::steady_clock::now();
  auto seconds = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  };
  SolveResult out;
  SolverTrace& trace = out.trace;
  const Eigen::Index n = obj.dim();
  if (u.size() != n) throw std::invalid_argument("solver: bad start length");
  if (engine == StepEngine::SR1)
    out.sr1_h = opts.sr1_h0_scale * MatrixXd::Identity(n, n);

  auto rel_errs = [&](const VectorXd& uu, double* ea, double* es) {
    *ea = *es = std::numeric_limits<double>::quiet_NaN();
    if (opts.truth.size() == 0) return;
    const VectorXd x = opts.to_physical ? opts.to_physical(uu) : uu;
    const Eigen::Index P = x.size() / 2;
    *ea = relative_error(x.head(P), opts.truth.head(P));
    *es = relative_error(x.tail(P), opts.truth.tail(P));
  };

  double e = obj.value(u);
  if (!std::isfinite(e))
    throw std::domain_error("solver: objective infinite at the start point");
  VectorXd g = obj.gradient(u);
  const double tol = opts.grad_tol_scale * (1.0 + std::abs(e));
  {
    TraceRow r0;
    r0.objective = e;
    r0.grad_norm = g.norm();
    rel_errs(u, &r0.rel_err_mua, &r0.rel_err_mus);
    r0.seconds = seconds();
    trace.rows.push_back(r0);
  }

  int failed = 0;
  trace.termination = "max_iterations";
  for (int k = 1; k <= opts.max_iterations; ++k) {
    if (g.norm() <= tol) {
      trace.termination = "gradient_tolerance";
      break;
    }
    VectorXd p;
    switch (engine) {
      case StepEngine::GD: p = -g; break;
      case StepEngine::GN: p = obj.gn_direction(u); break;
      case StepEngine::SR1: p = -(out.sr1_h * g); break;
    }
    if (!p.allFinite())
      throw NumericalError("solver: non-finite step direction at iteration " +
                           std::to_string(k));

    double beta = 0, enew = e;
    bool ok = false;
    if (opts.use_exact_step) {
      if (const auto t = obj.exact_step(u, p)) {
        beta = *t;
        enew = obj.value(u + beta * p);
        ok = enew <= e;
      }
    }
    if (!ok) {
      beta = 1.0;
      for (int h = 0; h <= opts.max_bisections; ++h, beta *= 0.5) {
        const double trial = obj.value(u + beta * p);
        if (trial < e) {
          enew = trial;
          ok = true;
          break;
        }
      }
    }
    if (!ok) {
      ++failed;
      TraceRow r;
      r.iteration = k;
      r.objective = e;
      r.beta = 0.0;
      r.grad_norm = g.norm();
      rel_errs(u, &r.rel_err_mua, &r.rel_err_mus);
      r.seconds = seconds();
      trace.rows.push_back(r);
      if (failed >= opts.max_failed_searches) {
        trace.termination = "stalled";
        break;
      }
      continue;
    }
    failed = 0;
    const VectorXd unew = u + beta * p;
    const VectorXd gnew = obj.gradient(unew);
    if (engine == StepEngine::SR1) {
      if (!sr1_update(out.sr1_h, unew - u, gnew - g, opts.sr1_omega))
        ++trace.sr1_skipped_updates;
    }
    u = unew;
    e = enew;
    g = gnew;
    TraceRow r;
    r.iteration = k;
    r.objective = e;
    r.beta = beta;
    r.grad_norm = g.norm();
    rel_errs(u, &r.rel_err_mua, &r.rel_err_mus);
    r.seconds = seconds();
    trace.rows.push_back(r);
    if (g.norm() <= tol) {
      trace.termination = "gradient_tolerance";
      break;
    }
  }
  out.u = std::move(u);
  return out;
}

inline SolveResult gd_solve(Objective& obj, const VectorXd& u0,
                            const SolveOptions& opts = {}) {
  return solve_loop(obj, u0, opts, StepEngine::GD);
}

inline SolveResult gn_solve(Objective& obj, const VectorXd& u0,
                            const SolveOptions& opts = {}) {
  return solve_loop(obj, u0, opts, StepEngine::GN);
}

inline SolveResult sr1_solve(Objective& obj, const VectorXd& u0,
                             const SolveOptions& opts = {}) {
  return solve_loop(obj, u0, opts, StepEngine::SR1);
}

// Gauss-Newton on the smoothed-TV objective; the objective's gn_direction is
// expected to carry the lagged-diffusivity Hessian of its TV prior
inline SolveResult tv_gn_solve(Objective& obj, const VectorXd& u0,
                               const SolveOptions& opts = {}) {
  return solve_loop(obj, u0, opts, StepEngine::GN);
}

}  // namespace qpat
