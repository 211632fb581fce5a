#pragma once

// Finite-element diffusion approximation on triangle meshes.
//
// System (M + C + R) Phi = Q with
//   M(i,j) = sum_e kappa_e  int_e grad(phi_i).grad(phi_j),
//   C(i,j) = sum_e          int_e mu_a phi_i phi_j,
//   R(i,j) = (2 gamma / A)  int_{boundary} phi_i phi_j,
//   Q(i)   = (2 / A)        int_{source}   I(r) phi_i,
// kappa = 1 / (n (mu_a + mu_s')), n = 2, gamma = 1/pi, A = 1 for a matched
// boundary. All element integrals are closed-form for the linear basis, so
// derivative checks are not polluted by quadrature error.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "qpat/common.hpp"
#include "qpat/mesh.hpp"

namespace qpat {

using Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;

inline constexpr double kDimension = 2.0;
inline constexpr double kGamma2d = std::numbers::inv_pi;

enum class ParamBasis { Nodal, Element };

inline std::size_t param_dof(const TriMesh& mesh, ParamBasis basis) {
  return basis == ParamBasis::Nodal ? mesh.node_count() : mesh.element_count();
}

// data lives on nodes for the nodal basis and on elements otherwise
inline std::size_t data_dof(const TriMesh& mesh, ParamBasis basis) {
  return basis == ParamBasis::Nodal ? mesh.node_count() : mesh.element_count();
}

inline double diffusion_kappa(double mu_a, double mu_s_prime) {
  return 1.0 / (kDimension * (mu_a + mu_s_prime));
}

struct OpticalFields {
  ParamBasis basis = ParamBasis::Nodal;
  VectorXd mu_a;
  VectorXd mu_s_prime;
  double g = 0.0;  // anisotropy; relevant to Monte Carlo only

  static OpticalFields homogeneous(const TriMesh& mesh, double mua, double musp,
                                   ParamBasis basis = ParamBasis::Nodal) {
    OpticalFields f;
    f.basis = basis;
    const auto n = param_dof(mesh, basis);
    f.mu_a = VectorXd::Constant(Eigen::Index(n), mua);
    f.mu_s_prime = VectorXd::Constant(Eigen::Index(n), musp);
    return f;
  }

  // scattering coefficient seen by the Monte Carlo model
  VectorXd mu_s() const {
    if (g <= -1.0 || g >= 1.0)
      throw std::domain_error("optical fields: anisotropy must lie in (-1, 1)");
    return mu_s_prime / (1.0 - g);
  }

  std::size_t dof() const { return std::size_t(mu_a.size()); }

  void validate(const TriMesh& mesh) const {
    const auto n = param_dof(mesh, basis);
    if (dof() != n || std::size_t(mu_s_prime.size()) != n)
      throw std::invalid_argument("optical fields: dof count mismatch");
    for (Eigen::Index i = 0; i < mu_a.size(); ++i) {
      if (!(mu_a[i] >= 0.0) || !(mu_s_prime[i] > 0.0))
        throw std::domain_error(
            "optical fields: need mu_a >= 0 and mu_s' > 0 at dof " +
            std::to_string(i));
    }
    if (g <= -1.0 || g >= 1.0)
      throw std::domain_error("optical fields: anisotropy must lie in (-1, 1)");
  }

  bool same_values(const OpticalFields& o) const {
    return basis == o.basis && g == o.g && mu_a.size() == o.mu_a.size() &&
           mu_s_prime.size() == o.mu_s_prime.size() && mu_a == o.mu_a &&
           mu_s_prime == o.mu_s_prime;
  }
};

struct SourceSpec {
  std::vector<std::string> segments;  // labels carrying nonzero intensity
  VectorXd intensity;                 // per-node I(r), read on source edges
  double A = 1.0;
  double gamma = kGamma2d;

  void validate(const TriMesh& mesh) const {
    if (std::size_t(intensity.size()) != mesh.node_count())
      throw std::invalid_argument("source: intensity length != node count");
    if (!(A > 0.0)) throw std::invalid_argument("source: need A > 0");
    for (const auto& s : segments)
      if (mesh.label_index(s) < 0)
        throw std::invalid_argument("source: unknown segment label '" + s + "'");
    for (Eigen::Index i = 0; i < intensity.size(); ++i)
      if (intensity[i] < 0.0)
        throw std::invalid_argument("source: negative intensity");
  }

  bool has_power() const { return intensity.maxCoeff() > 0.0; }
};

// uniform profile normalized so the integral of I over the segment is `power`
inline SourceSpec make_uniform_source(const TriMesh& mesh,
                                      const std::string& label,
                                      double power = 1.0) {
  const int lab = mesh.label_index(label);
  if (lab < 0)
    throw std::invalid_argument("make_uniform_source: unknown label '" + label +
                                "'");
  double total_len = 0;
  for (const auto& be : mesh.boundary_edges) {
    if (be.label != lab) continue;
    const double ex = mesh.nodes[be.a][0] - mesh.nodes[be.b][0];
    const double ey = mesh.nodes[be.a][1] - mesh.nodes[be.b][1];
    total_len += std::hypot(ex, ey);
  }
  if (total_len <= 0.0)
    throw std::invalid_argument("make_uniform_source: empty segment");
  SourceSpec s;
  s.segments = {label};
  s.intensity = VectorXd::Zero(Eigen::Index(mesh.node_count()));
  const double level = power / total_len;
  for (const auto& be : mesh.boundary_edges) {
    if (be.label != lab) continue;
    s.intensity[be.a] = level;
    s.intensity[be.b] = level;
  }
  return s;
}

struct SystemParts {
  SpMat M, C, R;
  SpMat system() const { return SpMat(M + C + R); }
};

namespace detail {

struct ElementGeometry {
  double area;
  double b[3], c[3];  // grad(phi_i) = (b_i, c_i), constant per element
};

inline ElementGeometry element_geometry(const TriMesh& mesh, std::size_t e) {
  const auto& t = mesh.elements[e];
  const auto& p0 = mesh.nodes[t[0]];
  const auto& p1 = mesh.nodes[t[1]];
  const auto& p2 = mesh.nodes[t[2]];
  ElementGeometry g;
  const double det = (p1[0] - p0[0]) * (p2[1] - p0[1]) -
                     (p2[0] - p0[0]) * (p1[1] - p0[1]);
  g.area = 0.5 * det;
  if (!(g.area > 0.0))
    throw NumericalError("assembly: degenerate element " + std::to_string(e));
  g.b[0] = (p1[1] - p2[1]) / det;
  g.b[1] = (p2[1] - p0[1]) / det;
  g.b[2] = (p0[1] - p1[1]) / det;
  g.c[0] = (p2[0] - p1[0]) / det;
  g.c[1] = (p0[0] - p2[0]) / det;
  g.c[2] = (p1[0] - p0[0]) / det;
  return g;
}

// int_e phi_t phi_i phi_j / area: 1/10 all equal, 1/30 two equal, 1/60 none
inline double cubic_coeff(int t, int i, int j) {
  const int eq = int(t == i) + int(t == j) + int(i == j);
  if (eq == 3) return 1.0 / 10.0;
  if (eq == 1) return 1.0 / 30.0;
  return 1.0 / 60.0;
}

}  // namespace detail

inline SystemParts assemble_parts(const TriMesh& mesh,
                                  const OpticalFields& fields, double A = 1.0,
                                  double gamma = kGamma2d) {
  fields.validate(mesh);
  if (!(A > 0.0) || !(gamma > 0.0))
    throw std::domain_error("assembly: need A > 0 and gamma > 0");
  const Eigen::Index n = Eigen::Index(mesh.node_count());
  std::vector<Eigen::Triplet<double>> tm, tc, tr;
  tm.reserve(mesh.element_count() * 9);
  tc.reserve(mesh.element_count() * 9);
  for (std::size_t e = 0; e < mesh.element_count(); ++e) {
    const auto geo = detail::element_geometry(mesh, e);
    const auto& t = mesh.elements[e];
    double kappa_bar, mua_node[3];
    if (fields.basis == ParamBasis::Nodal) {
      kappa_bar = (diffusion_kappa(fields.mu_a[t[0]], fields.mu_s_prime[t[0]]) +
                   diffusion_kappa(fields.mu_a[t[1]], fields.mu_s_prime[t[1]]) +
                   diffusion_kappa(fields.mu_a[t[2]], fields.mu_s_prime[t[2]])) /
                  3.0;
      for (int k = 0; k < 3; ++k) mua_node[k] = fields.mu_a[t[k]];
    } else {
      kappa_bar = diffusion_kappa(fields.mu_a[Eigen::Index(e)],
                                  fields.mu_s_prime[Eigen::Index(e)]);
      for (int k = 0; k < 3; ++k) mua_node[k] = fields.mu_a[Eigen::Index(e)];
    }
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const double mij =
            kappa_bar * geo.area * (geo.b[i] * geo.b[j] + geo.c[i] * geo.c[j]);
        tm.emplace_back(t[i], t[j], mij);
        double cij = 0;
        for (int k = 0; k < 3; ++k)
          cij += mua_node[k] * detail::cubic_coeff(k, i, j);
        tc.emplace_back(t[i], t[j], cij * geo.area);
      }
    }
  }
  const double rscale = 2.0 * gamma / A;
  for (const auto& be : mesh.boundary_edges) {
    const double ex = mesh.nodes[be.a][0] - mesh.nodes[be.b][0];
    const double ey = mesh.nodes[be.a][1] - mesh.nodes[be.b][1];
    const double len = std::hypot(ex, ey);
    tr.emplace_back(be.a, be.a, rscale * len / 3.0);
    tr.emplace_back(be.b, be.b, rscale * len / 3.0);
    tr.emplace_back(be.a, be.b, rscale * len / 6.0);
    tr.emplace_back(be.b, be.a, rscale * len / 6.0);
  }
  SystemParts parts;
  parts.M.resize(n, n);
  parts.C.resize(n, n);
  parts.R.resize(n, n);
  parts.M.setFromTriplets(tm.begin(), tm.end());
  parts.C.setFromTriplets(tc.begin(), tc.end());
  parts.R.setFromTriplets(tr.begin(), tr.end());
  return parts;
}

inline SpMat assemble_system(const TriMesh& mesh, const OpticalFields& fields,
                             double A = 1.0, double gamma = kGamma2d) {
  return assemble_parts(mesh, fields, A, gamma).system();
}

inline VectorXd assemble_source(const TriMesh& mesh, const SourceSpec& source) {
  source.validate(mesh);
  std::vector<char> active(mesh.segment_labels.size(), 0);
  for (const auto& s : source.segments) active[mesh.label_index(s)] = 1;
  VectorXd q = VectorXd::Zero(Eigen::Index(mesh.node_count()));
  const double scale = 2.0 / source.A;
  for (const auto& be : mesh.boundary_edges) {
    if (!active[be.label]) continue;
    const double ex = mesh.nodes[be.a][0] - mesh.nodes[be.b][0];
    const double ey = mesh.nodes[be.a][1] - mesh.nodes[be.b][1];
    const double len = std::hypot(ex, ey);
    const double ia = source.intensity[be.a], ib = source.intensity[be.b];
    q[be.a] += scale * len * (2.0 * ia + ib) / 6.0;
    q[be.b] += scale * len * (ia + 2.0 * ib) / 6.0;
  }
  return q;
}

// Sparse Cholesky with a conjugate-gradient fallback; the factorization is
// reused across illuminations and across all Jacobian / adjoint solves at a
// fixed parameter value.
class DiffusionSolver {
 public:
  DiffusionSolver(const TriMesh& mesh, OpticalFields fields, double A = 1.0,
                  double gamma = kGamma2d)
      : fields_(std::move(fields)), A_(A), gamma_(gamma) {
    parts_ = assemble_parts(mesh, fields_, A_, gamma_);
    system_ = parts_.system();
    llt_.compute(system_);
    direct_ok_ = (llt_.info() == Eigen::Success);
    if (!direct_ok_) {
      cg_.setTolerance(1e-14);
      cg_.setMaxIterations(20000);
      cg_.compute(system_);
      if (cg_.info() != Eigen::Success)
        throw NumericalError(
            "diffusion solve: Cholesky and CG setup both failed (n=" +
            std::to_string(system_.rows()) + ")");
    }
  }

  const SpMat& system() const { return system_; }
  const SystemParts& parts() const { return parts_; }
  const OpticalFields& fields() const { return fields_; }
  double A() const { return A_; }
  double gamma() const { return gamma_; }
  bool matches(const OpticalFields& f) const { return fields_.same_values(f); }

  MatrixXd solve(const MatrixXd& q) const {
    MatrixXd phi = direct_ok_ ? MatrixXd(llt_.solve(q)) : MatrixXd(cg_.solve(q));
    for (Eigen::Index c = 0; c < q.cols(); ++c) {
      const double qn = q.col(c).norm();
      const double res = (system_ * phi.col(c) - q.col(c)).norm();
      if (res > 1e-10 * qn + 1e-300)
        throw NumericalError("diffusion solve: residual " + std::to_string(res) +
                             " exceeds 1e-10*|Q| (column " + std::to_string(c) +
                             ")");
    }
    return phi;
  }

  VectorXd solve(const VectorXd& q) const {
    return VectorXd(solve(MatrixXd(q)));
  }

 private:
  OpticalFields fields_;
  double A_, gamma_;
  SystemParts parts_;
  SpMat system_;
  Eigen::SimplicialLLT<SpMat> llt_;
  Eigen::ConjugateGradient<SpMat, Eigen::Lower | Eigen::Upper> cg_;
  bool direct_ok_ = false;
};

// forward data h = mu_a * Phi; nodal product in the nodal basis, element
// value times element-mean fluence in the element basis
inline MatrixXd absorbed_energy(const TriMesh& mesh,
                                const OpticalFields& fields,
                                const MatrixXd& phi) {
  if (std::size_t(phi.rows()) != mesh.node_count())
    throw std::invalid_argument("absorbed_energy: fluence dof mismatch");
  if (fields.basis == ParamBasis::Nodal) {
    if (fields.dof() != mesh.node_count())
      throw std::invalid_argument("absorbed_energy: field dof mismatch");
    return phi.array().colwise() * fields.mu_a.array();
  }
  if (fields.dof() != mesh.element_count())
    throw std::invalid_argument("absorbed_energy: field dof mismatch");
  MatrixXd h(mesh.element_count(), phi.cols());
  for (std::size_t e = 0; e < mesh.element_count(); ++e) {
    const auto& t = mesh.elements[e];
    h.row(Eigen::Index(e)) =
        fields.mu_a[Eigen::Index(e)] / 3.0 *
        (phi.row(t[0]) + phi.row(t[1]) + phi.row(t[2]));
  }
  return h;
}

// convenience: solve all illuminations and return data columns
inline MatrixXd forward_data(const TriMesh& mesh, const OpticalFields& fields,
                             const std::vector<SourceSpec>& sources,
                             const DiffusionSolver* reuse = nullptr) {
  if (sources.empty())
    throw std::invalid_argument("forward_data: no sources given");
  std::optional<DiffusionSolver> own;
  const DiffusionSolver* solver = reuse;
  if (solver == nullptr || !solver->matches(fields)) {
    own.emplace(mesh, fields, sources[0].A, sources[0].gamma);
    solver = &*own;
  }
  MatrixXd q(mesh.node_count(), sources.size());
  for (std::size_t s = 0; s < sources.size(); ++s)
    q.col(Eigen::Index(s)) = assemble_source(mesh, sources[s]);
  return absorbed_energy(mesh, fields, solver->solve(q));
}

}  // namespace qpat
