#pragma once

// Derivatives of the forward operator. The parameter vector is the stacked
// pair x = [mu_a; mu_s'] (2P), data rows are illumination-major (column-wise
// flattening of the N_data x I data matrix).
//
// Direct method: d(Phi)/dx_t = -K^{-1} (dK/dx_t) Phi with
// d(kappa)/d(mu_a) = d(kappa)/d(mu_s') = -1/(n (mu_a + mu_s')^2), reusing the
// cached factorization for every column and every adjoint solve.

#include <functional>

#include "qpat/forward.hpp"

namespace qpat {

struct TransformConfig {
  bool log_param = false;
  bool log_data = false;
};

struct JacobianMatrix {
  MatrixXd m;  // (I * N_data) x (2P), column blocks [mu_a | mu_s']
  std::size_t illuminations = 0;
  std::size_t data_per_ill = 0;
  bool log_param = false;
  bool log_data = false;
  int floored_rows = 0;  // rows clamped by the log-data floor
};

inline VectorXd stack_params(const VectorXd& mu_a, const VectorXd& mu_s_prime) {
  VectorXd x(mu_a.size() + mu_s_prime.size());
  x << mu_a, mu_s_prime;
  return x;
}

inline OpticalFields fields_from_stacked(const VectorXd& x, ParamBasis basis,
                                         double g = 0.0) {
  if (x.size() % 2 != 0)
    throw std::invalid_argument("stacked parameter vector must have even size");
  OpticalFields f;
  f.basis = basis;
  f.g = g;
  const Eigen::Index p = x.size() / 2;
  f.mu_a = x.head(p);
  f.mu_s_prime = x.tail(p);
  return f;
}

namespace detail {

inline double dkappa(double mu_a, double mu_s_prime) {
  const double s = mu_a + mu_s_prime;
  return -1.0 / (kDimension * s * s);
}

inline std::vector<std::vector<std::uint32_t>> node_elements(
    const TriMesh& mesh) {
  std::vector<std::vector<std::uint32_t>> adj(mesh.node_count());
  for (std::size_t e = 0; e < mesh.element_count(); ++e)
    for (const auto v : mesh.elements[e]) adj[v].push_back(std::uint32_t(e));
  return adj;
}

// y|e += coeff * G_e phi|e with G_e(i,j) = area (b_i b_j + c_i c_j)
inline void add_grad_apply(const ElementGeometry& g,
                           const std::array<std::uint32_t, 3>& t,
                           const VectorXd& phi, double coeff, VectorXd& y) {
  double gphi[3];
  for (int i = 0; i < 3; ++i)
    gphi[i] = g.area * (g.b[i] * (g.b[0] * phi[t[0]] + g.b[1] * phi[t[1]] +
                                  g.b[2] * phi[t[2]]) +
                        g.c[i] * (g.c[0] * phi[t[0]] + g.c[1] * phi[t[1]] +
                                  g.c[2] * phi[t[2]]));
  for (int i = 0; i < 3; ++i) y[t[i]] += coeff * gphi[i];
}

// y|e += coeff * C3(local t) phi|e with C3(t)(i,j) = area * cubic_coeff(t,i,j)
inline void add_cubic_apply(const ElementGeometry& g,
                            const std::array<std::uint32_t, 3>& t, int local_t,
                            const VectorXd& phi, double coeff, VectorXd& y) {
  for (int i = 0; i < 3; ++i) {
    double v = 0;
    for (int j = 0; j < 3; ++j)
      v += cubic_coeff(local_t, i, j) * phi[t[j]];
    y[t[i]] += coeff * g.area * v;
  }
}

inline double grad_pair(const ElementGeometry& g,
                        const std::array<std::uint32_t, 3>& t,
                        const VectorXd& lam, const VectorXd& phi) {
  double bl = 0, cl = 0, bp = 0, cp = 0;
  for (int i = 0; i < 3; ++i) {
    bl += g.b[i] * lam[t[i]];
    cl += g.c[i] * lam[t[i]];
    bp += g.b[i] * phi[t[i]];
    cp += g.c[i] * phi[t[i]];
  }
  return g.area * (bl * bp + cl * cp);
}

inline double cubic_pair(const ElementGeometry& g,
                         const std::array<std::uint32_t, 3>& t, int local_t,
                         const VectorXd& lam, const VectorXd& phi) {
  double v = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      v += lam[t[i]] * cubic_coeff(local_t, i, j) * phi[t[j]];
  return g.area * v;
}

}  // namespace detail

// Full dense Jacobian of the forward data w.r.t. [mu_a; mu_s'].
inline JacobianMatrix jacobian(const TriMesh& mesh, const OpticalFields& fields,
                               const DiffusionSolver& solver,
                               const MatrixXd& phi) {
  if (!solver.matches(fields))
    throw InvalidState("jacobian: factorization is stale for these fields");
  const std::size_t P = fields.dof();
  const std::size_t nd = data_dof(mesh, fields.basis);
  const std::size_t I = std::size_t(phi.cols());
  const bool nodal = fields.basis == ParamBasis::Nodal;

  std::vector<detail::ElementGeometry> geo(mesh.element_count());
  for (std::size_t e = 0; e < mesh.element_count(); ++e)
    geo[e] = detail::element_geometry(mesh, e);
  const auto adj = nodal ? detail::node_elements(mesh)
                         : std::vector<std::vector<std::uint32_t>>{};

  JacobianMatrix J;
  J.illuminations = I;
  J.data_per_ill = nd;
  J.m.setZero(Eigen::Index(I * nd), Eigen::Index(2 * P));

  // element-mean fluence rows for the element-basis data map
  MatrixXd phi_bar;
  if (!nodal) {
    phi_bar.resize(mesh.element_count(), I);
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
      const auto& t = mesh.elements[e];
      phi_bar.row(Eigen::Index(e)) =
          (phi.row(t[0]) + phi.row(t[1]) + phi.row(t[2])) / 3.0;
    }
  }

  for (int block = 0; block < 2; ++block) {  // 0: mu_a, 1: mu_s'
    MatrixXd rhs = MatrixXd::Zero(Eigen::Index(mesh.node_count()),
                                  Eigen::Index(P * I));
    for (std::size_t t = 0; t < P; ++t) {
      for (std::size_t il = 0; il < I; ++il) {
        VectorXd col = VectorXd::Zero(Eigen::Index(mesh.node_count()));
        const VectorXd& ph = phi.col(Eigen::Index(il));
        // col = -(dK/dx_t) phi
        if (nodal) {
          const double dk =
              detail::dkappa(fields.mu_a[Eigen::Index(t)],
                             fields.mu_s_prime[Eigen::Index(t)]) /
              3.0;
          for (const auto e : adj[t]) {
            const auto& tri = mesh.elements[e];
            detail::add_grad_apply(geo[e], tri, ph, -dk, col);
            if (block == 0) {
              int local_t = 0;
              for (int k = 0; k < 3; ++k)
                if (tri[k] == t) local_t = k;
              detail::add_cubic_apply(geo[e], tri, local_t, ph, -1.0, col);
            }
          }
        } else {
          const auto& tri = mesh.elements[t];
          const double dk = detail::dkappa(fields.mu_a[Eigen::Index(t)],
                                           fields.mu_s_prime[Eigen::Index(t)]);
          detail::add_grad_apply(geo[t], tri, ph, -dk, col);
          if (block == 0) {
            // element-constant absorption mass: area/6 diag, area/12 off
            for (int i = 0; i < 3; ++i) {
              double v = 0;
              for (int j = 0; j < 3; ++j)
                v += (i == j ? 1.0 / 6.0 : 1.0 / 12.0) * ph[tri[j]];
              col[tri[i]] -= geo[t].area * v;
            }
          }
        }
        rhs.col(Eigen::Index(t * I + il)) = col;
      }
    }
    const MatrixXd dphi = solver.solve(rhs);
    for (std::size_t t = 0; t < P; ++t) {
      for (std::size_t il = 0; il < I; ++il) {
        const VectorXd& dp = dphi.col(Eigen::Index(t * I + il));
        auto rows = J.m.block(Eigen::Index(il * nd), Eigen::Index(block * P + t),
                              Eigen::Index(nd), 1);
        if (nodal) {
          rows = (fields.mu_a.array() * dp.array()).matrix();
          if (block == 0) rows(Eigen::Index(t), 0) += phi(Eigen::Index(t), Eigen::Index(il));
        } else {
          for (std::size_t e = 0; e < mesh.element_count(); ++e) {
            const auto& tri = mesh.elements[e];
            rows(Eigen::Index(e), 0) =
                fields.mu_a[Eigen::Index(e)] *
                (dp[tri[0]] + dp[tri[1]] + dp[tri[2]]) / 3.0;
          }
          if (block == 0)
            rows(Eigen::Index(t), 0) += phi_bar(Eigen::Index(t), Eigen::Index(il));
        }
      }
    }
  }
  return J;
}

// J^T y without forming J; y has one weighted-residual column per
// illumination (N_data x I). One adjoint solve per illumination.
inline VectorXd adjoint_gradient(const TriMesh& mesh,
                                 const OpticalFields& fields,
                                 const DiffusionSolver& solver,
                                 const MatrixXd& phi, const MatrixXd& y) {
  if (!solver.matches(fields))
    throw InvalidState("adjoint_gradient: factorization is stale");
  const std::size_t P = fields.dof();
  const std::size_t nd = data_dof(mesh, fields.basis);
  const std::size_t I = std::size_t(phi.cols());
  if (std::size_t(y.rows()) != nd || std::size_t(y.cols()) != I)
    throw std::invalid_argument("adjoint_gradient: weighted residual shape");
  const bool nodal = fields.basis == ParamBasis::Nodal;

  // back-project data cotangents onto nodes: rhs = (dh/dPhi)^T y
  MatrixXd rhs(mesh.node_count(), I);
  if (nodal) {
    rhs = y.array().colwise() * fields.mu_a.array();
  } else {
    rhs.setZero();
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
      const auto& tri = mesh.elements[e];
      for (int k = 0; k < 3; ++k)
        rhs.row(tri[k]) += fields.mu_a[Eigen::Index(e)] / 3.0 * y.row(Eigen::Index(e));
    }
  }
  const MatrixXd lam = solver.solve(rhs);

  VectorXd g = VectorXd::Zero(Eigen::Index(2 * P));
  // explicit mu_a term of the data map
  if (nodal) {
    for (std::size_t il = 0; il < I; ++il)
      g.head(Eigen::Index(P)) +=
          (phi.col(Eigen::Index(il)).array() * y.col(Eigen::Index(il)).array())
              .matrix();
  } else {
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
      const auto& tri = mesh.elements[e];
      for (std::size_t il = 0; il < I; ++il)
        g[Eigen::Index(e)] += y(Eigen::Index(e), Eigen::Index(il)) *
                              (phi(tri[0], Eigen::Index(il)) +
                               phi(tri[1], Eigen::Index(il)) +
                               phi(tri[2], Eigen::Index(il))) /
                              3.0;
    }
  }
  // PDE term: g_t -= lambda^T (dK/dx_t) phi, accumulated element-wise
  for (std::size_t e = 0; e < mesh.element_count(); ++e) {
    const auto geo = detail::element_geometry(mesh, e);
    const auto& tri = mesh.elements[e];
    for (std::size_t il = 0; il < I; ++il) {
      const VectorXd& ph = phi.col(Eigen::Index(il));
      const VectorXd& lm = lam.col(Eigen::Index(il));
      const double s1 = detail::grad_pair(geo, tri, lm, ph);
      if (nodal) {
        for (int k = 0; k < 3; ++k) {
          const auto t = tri[k];
          const double dk =
              detail::dkappa(fields.mu_a[t], fields.mu_s_prime[t]) / 3.0;
          const double s2 = detail::cubic_pair(geo, tri, k, lm, ph);
          g[t] -= dk * s1 + s2;
          g[Eigen::Index(P + t)] -= dk * s1;
        }
      } else {
        const double dk = detail::dkappa(fields.mu_a[Eigen::Index(e)],
                                         fields.mu_s_prime[Eigen::Index(e)]);
        double s2 = 0;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j)
            s2 += lm[tri[i]] * (i == j ? 1.0 / 6.0 : 1.0 / 12.0) * ph[tri[j]];
        g[Eigen::Index(e)] -= dk * s1 + geo.area * s2;
        g[Eigen::Index(P + e)] -= dk * s1;
      }
    }
  }
  return g;
}

inline void log_param_push(JacobianMatrix& J, const VectorXd& x) {
  if (J.log_param) throw InvalidState("log_param_push: already applied");
  if (x.size() != J.m.cols())
    throw std::invalid_argument("log_param_push: size mismatch");
  if (x.minCoeff() <= 0.0)
    throw std::domain_error("log_param_push: parameters must be positive");
  J.m = J.m * x.asDiagonal();
  J.log_param = true;
}

inline double log_data_floor(const MatrixXd& fx) {
  return 1e-12 * fx.maxCoeff();
}

// rows scaled by 1/max(F_i, floor); fx is flattened illumination-major
inline void log_data_push(JacobianMatrix& J, const VectorXd& fx_flat) {
  if (J.log_data) throw InvalidState("log_data_push: already applied");
  if (fx_flat.size() != J.m.rows())
    throw std::invalid_argument("log_data_push: size mismatch");
  const double floor = 1e-12 * fx_flat.maxCoeff();
  if (!(floor > 0.0))
    throw std::domain_error("log_data_push: forward data is not positive");
  for (Eigen::Index i = 0; i < fx_flat.size(); ++i) {
    const double f = fx_flat[i];
    if (f < floor) ++J.floored_rows;
    J.m.row(i) /= std::max(f, floor);
  }
  J.log_data = true;
}

// data-fit gradient in the (possibly transformed) solution space:
//   E(x) = 1/2 sum_ill (d - F)^T W (d - F),  grad = -J~^T W r~
// with the log transforms of the config applied. `w` is the diagonal of W
// per data dof, shared across illuminations.
inline VectorXd data_fit_gradient(const TriMesh& mesh,
                                  const std::vector<SourceSpec>& sources,
                                  ParamBasis basis, const VectorXd& x,
                                  const MatrixXd& data, const VectorXd& w,
                                  const TransformConfig& tc = {},
                                  int* floor_warnings = nullptr) {
  const auto fields = fields_from_stacked(x, basis);
  DiffusionSolver solver(mesh, fields, sources.at(0).A, sources.at(0).gamma);
  MatrixXd q(mesh.node_count(), sources.size());
  for (std::size_t s = 0; s < sources.size(); ++s)
    q.col(Eigen::Index(s)) = assemble_source(mesh, sources[s]);
  const MatrixXd phi = solver.solve(q);
  const MatrixXd fx = absorbed_energy(mesh, fields, phi);
  if (fx.rows() != data.rows() || fx.cols() != data.cols())
    throw std::invalid_argument("data_fit_gradient: data shape mismatch");
  if (w.size() != data.rows())
    throw std::invalid_argument("data_fit_gradient: weight length mismatch");

  MatrixXd y(fx.rows(), fx.cols());
  if (tc.log_data) {
    const double floor = log_data_floor(fx);
    for (Eigen::Index c = 0; c < fx.cols(); ++c) {
      for (Eigen::Index i = 0; i < fx.rows(); ++i) {
        const double f = std::max(fx(i, c), floor);
        const double d = std::max(data(i, c), floor);
        if ((fx(i, c) < floor || data(i, c) < floor) && floor_warnings)
          ++*floor_warnings;
        // row scaling 1/F folds the log-data Jacobian into the adjoint input
        y(i, c) = w[i] * (std::log(d) - std::log(f)) / f;
      }
    }
  } else {
    y = (data - fx).array().colwise() * w.array();
  }
  VectorXd grad = -adjoint_gradient(mesh, fields, solver, phi, y);
  if (tc.log_param) grad.array() *= x.array();
  return grad;
}

// Hessian-vector product by central differences of a gradient callable.
// eps = sqrt(machine eps) (1 + |x|_inf) / |v|_inf, shrunk if positivity of
// x +/- eps v is required but violated.
inline VectorXd hvp_central(const std::function<VectorXd(const VectorXd&)>& grad_fn,
                            const VectorXd& x, const VectorXd& v,
                            bool require_positive = true) {
  const double vn = v.lpNorm<Eigen::Infinity>();
  if (vn == 0.0) return VectorXd::Zero(x.size());
  double eps = std::sqrt(std::numeric_limits<double>::epsilon()) *
               (1.0 + x.lpNorm<Eigen::Infinity>()) / vn;
  if (require_positive) {
    int tries = 0;
    while ((x - eps * v).minCoeff() <= 0.0 || (x + eps * v).minCoeff() <= 0.0) {
      eps *= 0.5;
      if (++tries > 80)
        throw std::domain_error(
            "hvp: cannot keep x +/- eps v positive for any usable step");
    }
  }
  const VectorXd gp = grad_fn(x + eps * v);
  const VectorXd gm = grad_fn(x - eps * v);
  return (gp - gm) / (2.0 * eps);
}

// spec-shaped wrapper for the data-fit term; x and v live in physical space
// (the transforms only change which gradient is differenced)
inline VectorXd hvp(const TriMesh& mesh, const std::vector<SourceSpec>& sources,
                    ParamBasis basis, const VectorXd& x, const VectorXd& v,
                    const MatrixXd& data, const VectorXd& w,
                    const TransformConfig& tc = {}) {
  return hvp_central(
      [&](const VectorXd& xx) {
        return data_fit_gradient(mesh, sources, basis, xx, data, w, tc);
      },
      x, v, true);
}

}  // namespace qpat
