#pragma once

// Objective of the variational reconstruction:
//   E(x) = 1/2 |L_e (h - F(x))|^2 + Psi(x)
// with Psi either a weighted l2 prior built from an Ornstein-Uhlenbeck
// covariance, an uncorrelated l2 prior, or smoothed total variation. The
// prior always acts on physical parameters; in log-parameter mode its
// gradient and Hessian are chained with diag(x).

#include <variant>

#include "qpat/objective.hpp"
#include "qpat/sensitivity.hpp"

namespace qpat {

// Diagonal noise weighting: L_e = diag(l), W_e = L_e^T L_e. `l` is flattened
// illumination-major like the data; empty means identity.
struct NoiseWeighting {
  VectorXd l;

  bool is_identity() const { return l.size() == 0; }

  static NoiseWeighting identity() { return {}; }

  // L = diag(1 / sigma) for independent Gaussian noise with std sigma
  static NoiseWeighting from_noise_std(const MatrixXd& sigma) {
    NoiseWeighting w;
    w.l = Eigen::Map<const VectorXd>(sigma.data(), sigma.size());
    if (w.l.size() > 0 && w.l.minCoeff() <= 0.0)
      throw std::domain_error("noise weighting: stds must be positive");
    w.l = w.l.cwiseInverse();
    return w;
  }

  VectorXd w_diag(Eigen::Index n) const {
    if (is_identity()) return VectorXd::Ones(n);
    if (l.size() != n)
      throw std::invalid_argument("noise weighting: length mismatch");
    return l.array().square();
  }
};

// l2 prior  alpha/2 |L (x - mean)|^2  per parameter block; L is the inverse
// Cholesky factor of an OU covariance (L^T L = Gamma^-1), or identity in the
// uncorrelated variant.
struct OUPrior {
  double alpha_mua = 1.0, alpha_mus = 1.0;
  VectorXd mean;                     // stacked [mu_a; mu_s'], physical units
  MatrixXd L_mua, L_mus;             // empty => identity block
  MatrixXd W_mua, W_mus;             // cached L^T L

  Eigen::Index block() const { return mean.size() / 2; }

  void finalize() {
    if (mean.size() % 2 != 0)
      throw std::invalid_argument("ou prior: mean must stack two blocks");
    auto cache = [&](const MatrixXd& L, MatrixXd& W) {
      if (L.size() == 0)
        W = MatrixXd::Identity(block(), block());
      else
        W = L.transpose() * L;
    };
    cache(L_mua, W_mua);
    cache(L_mus, W_mus);
  }
};

// positions of the parameter dofs
inline std::vector<std::array<double, 2>> param_points(const TriMesh& mesh,
                                                       ParamBasis basis) {
  if (basis == ParamBasis::Nodal) return mesh.nodes;
  std::vector<std::array<double, 2>> pts(mesh.element_count());
  for (std::size_t e = 0; e < mesh.element_count(); ++e) {
    const auto& t = mesh.elements[e];
    pts[e] = {(mesh.nodes[t[0]][0] + mesh.nodes[t[1]][0] + mesh.nodes[t[2]][0]) / 3.0,
              (mesh.nodes[t[0]][1] + mesh.nodes[t[1]][1] + mesh.nodes[t[2]][1]) / 3.0};
  }
  return pts;
}

// Gamma(p,t) = sigma^2 exp(-|r_p - r_t| / ell); L = G^-1 with Gamma = G G^T,
// so L^T L = Gamma^-1
inline MatrixXd ou_inverse_cholesky(
    const std::vector<std::array<double, 2>>& pts, double sigma, double ell) {
  if (!(sigma > 0.0) || !(ell > 0.0))
    throw std::domain_error("ou prior: need sigma > 0 and ell > 0");
  const Eigen::Index n = Eigen::Index(pts.size());
  MatrixXd gamma(n, n);
  for (Eigen::Index p = 0; p < n; ++p)
    for (Eigen::Index t = 0; t <= p; ++t) {
      const double r = std::hypot(pts[p][0] - pts[t][0], pts[p][1] - pts[t][1]);
      gamma(p, t) = gamma(t, p) = sigma * sigma * std::exp(-r / ell);
    }
  const Eigen::LLT<MatrixXd> llt(gamma);
  if (llt.info() != Eigen::Success)
    throw NumericalError("ou prior: covariance is not positive definite");
  return llt.matrixL()
      .solve(MatrixXd::Identity(n, n));
}

inline OUPrior make_ou_prior(const TriMesh& mesh, ParamBasis basis,
                             double sigma_mua, double sigma_mus, double ell,
                             VectorXd mean, double alpha_mua = 1.0,
                             double alpha_mus = 1.0) {
  const auto pts = param_points(mesh, basis);
  if (std::size_t(mean.size()) != 2 * pts.size())
    throw std::invalid_argument("ou prior: mean length != 2 * param dof");
  OUPrior p;
  p.alpha_mua = alpha_mua;
  p.alpha_mus = alpha_mus;
  p.mean = std::move(mean);
  p.L_mua = ou_inverse_cholesky(pts, sigma_mua, ell);
  p.L_mus = ou_inverse_cholesky(pts, sigma_mus, ell);
  p.finalize();
  return p;
}

inline OUPrior make_uncorrelated_prior(Eigen::Index param_dof, VectorXd mean,
                                       double alpha_mua, double alpha_mus) {
  if (mean.size() != 2 * param_dof)
    throw std::invalid_argument("prior: mean length != 2 * param dof");
  OUPrior p;
  p.alpha_mua = alpha_mua;
  p.alpha_mus = alpha_mus;
  p.mean = std::move(mean);
  p.finalize();
  return p;
}

// regularization weights used by the learned Gauss-Newton direction
struct GnPreset {
  double alpha_mua, alpha_mus;
};
inline constexpr GnPreset kGnPresetA{10000.0, 1.8};
inline constexpr GnPreset kGnPresetB{12.5, 0.17};

struct PriorEval {
  double value = 0;
  VectorXd gradient;
  MatrixXd hessian;  // empty unless requested
};

inline PriorEval ou_value_grad_hess(const VectorXd& x, const OUPrior& prior,
                                    bool want_hessian = true) {
  const Eigen::Index P = prior.block();
  if (x.size() != 2 * P)
    throw std::invalid_argument("ou prior: parameter length mismatch");
  PriorEval out;
  out.gradient.setZero(2 * P);
  if (want_hessian) out.hessian = MatrixXd::Zero(2 * P, 2 * P);
  const double alpha[2] = {prior.alpha_mua, prior.alpha_mus};
  const MatrixXd* W[2] = {&prior.W_mua, &prior.W_mus};
  for (int b = 0; b < 2; ++b) {
    const auto d = x.segment(b * P, P) - prior.mean.segment(b * P, P);
    const VectorXd wd = (*W[b]) * d;
    out.value += 0.5 * alpha[b] * d.dot(wd);
    out.gradient.segment(b * P, P) = alpha[b] * wd;
    if (want_hessian)
      out.hessian.block(b * P, b * P, P, P) = alpha[b] * (*W[b]);
  }
  return out;
}

// smoothed total variation over the parameter adjacency graph
struct TVPrior {
  double alpha_mua = 0.1, alpha_mus = 0.1;
  double beta = 1e-4;
  std::vector<TriMesh::Edge> edges;  // indices within one parameter block
  Eigen::Index block = 0;
};

inline TVPrior make_tv_prior(const TriMesh& mesh, ParamBasis basis,
                             double alpha_mua = 0.1, double alpha_mus = 0.1,
                             double beta = 1e-4) {
  if (!(beta > 0.0)) throw std::domain_error("tv prior: need beta > 0");
  TVPrior p;
  p.alpha_mua = alpha_mua;
  p.alpha_mus = alpha_mus;
  p.beta = beta;
  p.block = Eigen::Index(param_dof(mesh, basis));
  if (basis == ParamBasis::Nodal) {
    p.edges = mesh.unique_edges();
  } else {
    // neighboring elements, weighted by their shared edge length
    const auto& nb = mesh.neighbors();
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
      for (int k = 0; k < 3; ++k) {
        const std::int32_t n = nb[e][k];
        if (n < 0 || std::size_t(n) < e) continue;
        const auto a = mesh.elements[e][k];
        const auto b = mesh.elements[e][(k + 1) % 3];
        const double len = std::hypot(mesh.nodes[a][0] - mesh.nodes[b][0],
                                      mesh.nodes[a][1] - mesh.nodes[b][1]);
        p.edges.push_back({std::uint32_t(e), std::uint32_t(n), len});
      }
    }
  }
  return p;
}

// value Sum_k d_k sqrt((x_p - x_t)^2 + beta) per block, analytic gradient,
// and (optionally) the lagged-diffusivity Hessian Sum_k d_k / sqrt(...) D_k
inline PriorEval tv_value_grad(const VectorXd& x, const TVPrior& prior,
                               bool want_hessian = false) {
  const Eigen::Index P = prior.block;
  if (x.size() != 2 * P)
    throw std::invalid_argument("tv prior: parameter length mismatch");
  PriorEval out;
  out.gradient.setZero(2 * P);
  if (want_hessian) out.hessian = MatrixXd::Zero(2 * P, 2 * P);
  const double alpha[2] = {prior.alpha_mua, prior.alpha_mus};
  for (int b = 0; b < 2; ++b) {
    for (const auto& e : prior.edges) {
      const Eigen::Index p = b * P + e.a, t = b * P + e.b;
      const double d = x[p] - x[t];
      const double root = std::sqrt(d * d + prior.beta);
      out.value += alpha[b] * e.length * root;
      const double g = alpha[b] * e.length * d / root;
      out.gradient[p] += g;
      out.gradient[t] -= g;
      if (want_hessian) {
        const double w = alpha[b] * e.length / root;
        out.hessian(p, p) += w;
        out.hessian(t, t) += w;
        out.hessian(p, t) -= w;
        out.hessian(t, p) -= w;
      }
    }
  }
  return out;
}

using PriorVariant = std::variant<std::monostate, OUPrior, TVPrior>;

inline PriorEval prior_eval(const VectorXd& x, const PriorVariant& prior,
                            bool want_hessian) {
  if (std::holds_alternative<OUPrior>(prior))
    return ou_value_grad_hess(x, std::get<OUPrior>(prior), want_hessian);
  if (std::holds_alternative<TVPrior>(prior))
    return tv_value_grad(x, std::get<TVPrior>(prior), want_hessian);
  PriorEval none;
  none.gradient.setZero(x.size());
  if (want_hessian) none.hessian = MatrixXd::Zero(x.size(), x.size());
  return none;
}

// Full inversion objective over solver-space u (u = log x when log_param).
// Forward artifacts are cached per evaluation point so value + gradient +
// direction at the same u cost one PDE solve.
class InversionProblem : public Objective {
 public:
  InversionProblem(const TriMesh& mesh, std::vector<SourceSpec> sources,
                   ParamBasis basis, MatrixXd data, NoiseWeighting weighting,
                   TransformConfig transforms, PriorVariant prior)
      : mesh_(mesh),
        sources_(std::move(sources)),
        basis_(basis),
        data_(std::move(data)),
        weighting_(std::move(weighting)),
        tc_(transforms),
        prior_(std::move(prior)) {
    if (sources_.empty())
      throw std::invalid_argument("inversion: no sources configured");
    const auto nd = data_dof(mesh_, basis_);
    if (std::size_t(data_.rows()) != nd ||
        std::size_t(data_.cols()) != sources_.size())
      throw std::invalid_argument("inversion: data shape mismatch");
    if (tc_.log_data && data_.maxCoeff() <= 0.0)
      throw std::invalid_argument("inversion: log-data mode needs positive data");
    q_.resize(mesh_.node_count(), sources_.size());
    for (std::size_t s = 0; s < sources_.size(); ++s)
      q_.col(Eigen::Index(s)) = assemble_source(mesh_, sources_[s]);
    w_ = weighting_.w_diag(Eigen::Index(data_.size()));
  }

  Eigen::Index dim() const override { return 2 * Eigen::Index(param_dof(mesh_, basis_)); }
  const TransformConfig& transforms() const { return tc_; }
  const PriorVariant& prior() const { return prior_; }

  VectorXd to_solver_space(const VectorXd& x) const {
    return tc_.log_param ? VectorXd(x.array().log()) : x;
  }
  VectorXd to_physical(const VectorXd& u) const {
    return tc_.log_param ? VectorXd(u.array().exp()) : u;
  }

  double value(const VectorXd& u) override {
    const VectorXd x = to_physical(u);
    if (x.minCoeff() <= 0.0 || !x.allFinite())
      return std::numeric_limits<double>::infinity();
    ensure_point(x);
    return fit_value_ + prior_eval(x, prior_, false).value;
  }

  VectorXd gradient(const VectorXd& u) override {
    const VectorXd x = to_physical(u);
    if (x.minCoeff() <= 0.0 || !x.allFinite())
      throw std::domain_error("inversion gradient: non-positive parameters");
    ensure_point(x);
    const MatrixXd y = weighted_residual_cotangent();
    VectorXd g = -adjoint_gradient(mesh_, fields_, *solver_, phi_, y);
    g += prior_eval(x, prior_, false).gradient;
    if (tc_.log_param) g.array() *= x.array();
    return g;
  }

  // (J~^T W J~ + chained prior Hessian) in solver space
  MatrixXd gn_matrix(const VectorXd& u) {
    const VectorXd x = to_physical(u);
    ensure_point(x);
    auto J = jacobian(mesh_, fields_, *solver_, phi_);
    if (tc_.log_data) {
      const VectorXd fx_flat = Eigen::Map<const VectorXd>(fx_.data(), fx_.size());
      log_data_push(J, fx_flat);
    }
    if (tc_.log_param) log_param_push(J, x);
    MatrixXd H = J.m.transpose() * w_.asDiagonal() * J.m;
    MatrixXd Hp = prior_eval(x, prior_, true).hessian;
    if (tc_.log_param)
      Hp = x.asDiagonal() * Hp * x.asDiagonal();
    H += Hp;
    return H;
  }

  VectorXd gn_direction(const VectorXd& u) override {
    const MatrixXd H = gn_matrix(u);
    const VectorXd g = gradient(u);
    const Eigen::LDLT<MatrixXd> ldlt(H);
    if (ldlt.info() != Eigen::Success)
      throw NumericalError("gn direction: model Hessian factorization failed");
    const VectorXd p = ldlt.solve(-g);
    if (!p.allFinite())
      throw NumericalError("gn direction: non-finite step (Hessian cond "
                           "issue, alpha too small?)");
    return p;
  }

  struct Bundle {
    double value;
    VectorXd gradient;
    std::optional<MatrixXd> gn;
  };
  Bundle bundle(const VectorXd& u, bool want_gn) {
    Bundle b{value(u), gradient(u), std::nullopt};
    if (want_gn) b.gn = gn_matrix(u);
    return b;
  }

  // forward data at u (physical data space)
  MatrixXd forward(const VectorXd& u) {
    ensure_point(to_physical(u));
    return fx_;
  }

 private:
  void ensure_point(const VectorXd& x) {
    if (have_point_ && x_cache_ == x) return;
    fields_ = fields_from_stacked(x, basis_);
    solver_.emplace(mesh_, fields_, sources_[0].A, sources_[0].gamma);
    phi_ = solver_->solve(q_);
    fx_ = absorbed_energy(mesh_, fields_, phi_);
    // residual in (possibly logged) data space
    if (tc_.log_data) {
      const double floor = log_data_floor(fx_);
      res_.resize(fx_.rows(), fx_.cols());
      for (Eigen::Index c = 0; c < fx_.cols(); ++c)
        for (Eigen::Index i = 0; i < fx_.rows(); ++i)
          res_(i, c) = std::log(std::max(data_(i, c), floor)) -
                       std::log(std::max(fx_(i, c), floor));
    } else {
      res_ = data_ - fx_;
    }
    const VectorXd r = Eigen::Map<const VectorXd>(res_.data(), res_.size());
    fit_value_ = 0.5 * r.dot((w_.array() * r.array()).matrix());
    x_cache_ = x;
    have_point_ = true;
  }

  // adjoint input: W r in physical data space; log-data folds in 1/F rows
  MatrixXd weighted_residual_cotangent() const {
    MatrixXd y(res_.rows(), res_.cols());
    const Eigen::Index nd = res_.rows();
    for (Eigen::Index c = 0; c < res_.cols(); ++c)
      for (Eigen::Index i = 0; i < nd; ++i)
        y(i, c) = w_[c * nd + i] * res_(i, c);
    if (tc_.log_data) {
      const double floor = log_data_floor(fx_);
      for (Eigen::Index c = 0; c < y.cols(); ++c)
        for (Eigen::Index i = 0; i < nd; ++i)
          y(i, c) /= std::max(fx_(i, c), floor);
    }
    return y;
  }

  const TriMesh& mesh_;
  std::vector<SourceSpec> sources_;
  ParamBasis basis_;
  MatrixXd data_;
  NoiseWeighting weighting_;
  TransformConfig tc_;
  PriorVariant prior_;
  MatrixXd q_;
  VectorXd w_;

  bool have_point_ = false;
  VectorXd x_cache_;
  OpticalFields fields_;
  std::optional<DiffusionSolver> solver_;
  MatrixXd phi_, fx_, res_;
  double fit_value_ = 0;
};

// spec-shaped convenience: weighted data misfit at physical parameters x
inline double data_fit(const TriMesh& mesh,
                       const std::vector<SourceSpec>& sources, ParamBasis basis,
                       const VectorXd& x, const MatrixXd& data,
                       const NoiseWeighting& weighting,
                       const TransformConfig& tc = {}) {
  InversionProblem prob(mesh, sources, basis, data, weighting, tc,
                        std::monostate{});
  return prob.value(prob.to_solver_space(x));
}

}  // namespace qpat
