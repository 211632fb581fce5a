#pragma once

// Abstract objective consumed by the iterative solvers. `u` lives in solver
// space (log-parameters when the log transform is on), so positivity of the
// physical parameters is structural rather than enforced by projection.

#include <optional>

#include <Eigen/Dense>

namespace qpat {

using Eigen::VectorXd;

class Objective {
 public:
  virtual ~Objective() = default;
  virtual Eigen::Index dim() const = 0;
  // +inf signals an infeasible point; line searches treat it as "no decrease"
  virtual double value(const VectorXd& u) = 0;
  virtual VectorXd gradient(const VectorXd& u) = 0;
  // Newton-type direction p solving (model Hessian) p = -gradient; solvers
  // that never call it (GD, SR1) work with gradient alone
  virtual VectorXd gn_direction(const VectorXd& u) {
    (void)u;
    throw std::logic_error("objective: gn_direction not provided");
  }
  // exact minimizer along u + t p when available (quadratic test problems)
  virtual std::optional<double> exact_step(const VectorXd& u,
                                           const VectorXd& p) {
    (void)u;
    (void)p;
    return std::nullopt;
  }
};

}  // namespace qpat
