#include <catch2/catch_amalgamated.hpp>

#include "qpat/rng.hpp"
#include "qpat/sensitivity.hpp"

using namespace qpat;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

OpticalFields random_fields(const TriMesh& mesh, Rng& rng,
                            ParamBasis basis = ParamBasis::Nodal) {
  OpticalFields f;
  f.basis = basis;
  const auto n = Eigen::Index(param_dof(mesh, basis));
  f.mu_a.resize(n);
  f.mu_s_prime.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    f.mu_a[i] = rng.uniform(0.008, 0.03);
    f.mu_s_prime[i] = rng.uniform(1.2, 2.8);
  }
  return f;
}

VectorXd flat(const MatrixXd& m) {
  return Eigen::Map<const VectorXd>(m.data(), m.size());
}

std::vector<SourceSpec> two_sources(const TriMesh& m) {
  return {make_uniform_source(m, "top", 1.0),
          make_uniform_source(m, "right", 1.0)};
}

// oracle: central finite differences of the (possibly transformed) forward
// map, step 1e-6 times the parameter scale
MatrixXd fd_jacobian(const TriMesh& mesh, const VectorXd& x, ParamBasis basis,
                     const std::vector<SourceSpec>& sources,
                     const TransformConfig& tc) {
  auto eval = [&](const VectorXd& xp) -> VectorXd {
    const MatrixXd fx =
        forward_data(mesh, fields_from_stacked(xp, basis), sources);
    if (!tc.log_data) return flat(fx);
    return flat(fx).array().log().matrix();
  };
  const Eigen::Index n = x.size();
  const Eigen::Index rows = eval(x).size();
  MatrixXd J(rows, n);
  for (Eigen::Index t = 0; t < n; ++t) {
    if (tc.log_param) {
      VectorXd lx = x.array().log();
      const double eps = 1e-6;
      VectorXd lp = lx, lm = lx;
      lp[t] += eps;
      lm[t] -= eps;
      J.col(t) = (eval(lp.array().exp()) - eval(lm.array().exp())) / (2 * eps);
    } else {
      const double eps = 1e-6 * x[t];
      VectorXd xp = x, xm = x;
      xp[t] += eps;
      xm[t] -= eps;
      J.col(t) = (eval(xp) - eval(xm)) / (2 * eps);
    }
  }
  return J;
}

JacobianMatrix analytic_jacobian(const TriMesh& mesh, const VectorXd& x,
                                 ParamBasis basis,
                                 const std::vector<SourceSpec>& sources,
                                 const TransformConfig& tc) {
  const auto fields = fields_from_stacked(x, basis);
  DiffusionSolver solver(mesh, fields);
  MatrixXd q(mesh.node_count(), sources.size());
  for (std::size_t s = 0; s < sources.size(); ++s)
    q.col(Eigen::Index(s)) = assemble_source(mesh, sources[s]);
  const MatrixXd phi = solver.solve(q);
  auto J = jacobian(mesh, fields, solver, phi);
  if (tc.log_data)
    log_data_push(J, flat(absorbed_energy(mesh, fields, phi)));
  if (tc.log_param) log_param_push(J, x);
  return J;
}

}  // namespace

TEST_CASE("jacobian matches finite differences in every transform mode") {
  const auto mesh = build_rect_mesh(10.0, 10.0, 5, 5);
  const auto sources = two_sources(mesh);
  Rng rng(101);
  for (const auto basis : {ParamBasis::Nodal, ParamBasis::Element}) {
    for (const bool lp : {false, true}) {
      for (const bool ld : {false, true}) {
        const TransformConfig tc{lp, ld};
        const auto f = random_fields(mesh, rng, basis);
        const VectorXd x = stack_params(f.mu_a, f.mu_s_prime);
        auto J = analytic_jacobian(mesh, x, basis, sources, tc);
        MatrixXd Jfd = fd_jacobian(mesh, x, basis, sources, tc);
        if (ld) {
          // rows in the floor regime (unilluminated corner nodes) follow the
          // clamp rather than calculus; the floor is covered separately
          const VectorXd fx =
              flat(forward_data(mesh, fields_from_stacked(x, basis), sources));
          for (Eigen::Index r = 0; r < fx.size(); ++r)
            if (!(fx[r] > 1e-9 * fx.maxCoeff())) {
              J.m.row(r).setZero();
              Jfd.row(r).setZero();
            }
        }
        const double rel = (J.m - Jfd).norm() / Jfd.norm();
        INFO("basis=" << int(basis) << " log_param=" << lp << " log_data=" << ld);
        REQUIRE(rel <= 1e-5);
      }
    }
  }
}

TEST_CASE("jacobian columns respect the diagonal mirror symmetry") {
  // square domain, homogeneous medium, equal top+right illumination: the
  // configuration is invariant under swapping x and y
  const std::uint32_t n = 4;
  const auto mesh = build_rect_mesh(10.0, 10.0, n, n);
  const auto fields = OpticalFields::homogeneous(mesh, 0.015, 2.0);
  SourceSpec s;
  s.segments = {"top", "right"};
  s.A = 1.0;
  s.intensity = VectorXd::Zero(mesh.node_count());
  for (const auto& be : mesh.boundary_edges)
    if (be.label == 1 || be.label == 2) {
      s.intensity[be.a] = 1.0;
      s.intensity[be.b] = 1.0;
    }
  DiffusionSolver solver(mesh, fields);
  const MatrixXd phi = solver.solve(MatrixXd(assemble_source(mesh, s)));
  auto perm = [&](std::size_t id) {
    const std::size_t i = id % (n + 1), j = id / (n + 1);
    return i * (n + 1) + j;
  };
  for (std::size_t i = 0; i < mesh.node_count(); ++i)
    REQUIRE_THAT(phi(Eigen::Index(perm(i)), 0),
                 WithinRel(phi(Eigen::Index(i), 0), 1e-10));

  const auto J = jacobian(mesh, fields, solver, phi);
  const std::size_t P = mesh.node_count();
  const double scale = J.m.cwiseAbs().maxCoeff();
  for (std::size_t block = 0; block < 2; ++block) {
    for (std::size_t t = 0; t < P; ++t) {
      const std::size_t tp = perm(t);
      for (std::size_t r = 0; r < P; ++r)
        REQUIRE_THAT(J.m(Eigen::Index(perm(r)), Eigen::Index(block * P + tp)),
                     WithinAbs(J.m(Eigen::Index(r), Eigen::Index(block * P + t)),
                               1e-10 * scale));
    }
  }
}

TEST_CASE("zero source gives an identically zero jacobian") {
  const auto mesh = build_rect_mesh(8.0, 8.0, 3, 3);
  const auto fields = OpticalFields::homogeneous(mesh, 0.01, 2.0);
  SourceSpec s;
  s.segments = {"top"};
  s.intensity = VectorXd::Zero(mesh.node_count());
  DiffusionSolver solver(mesh, fields);
  const MatrixXd phi = solver.solve(MatrixXd(assemble_source(mesh, s)));
  CHECK(jacobian(mesh, fields, solver, phi).m.norm() == 0.0);
}

TEST_CASE("adjoint gradient equals explicit J^T y") {
  Rng rng(211);
  for (const auto basis : {ParamBasis::Nodal, ParamBasis::Element}) {
    const auto mesh = build_rect_mesh(10.0, 12.0, 4, 5);
    const auto sources = two_sources(mesh);
    for (int trial = 0; trial < 5; ++trial) {
      const auto fields = random_fields(mesh, rng, basis);
      DiffusionSolver solver(mesh, fields);
      MatrixXd q(mesh.node_count(), 2);
      q.col(0) = assemble_source(mesh, sources[0]);
      q.col(1) = assemble_source(mesh, sources[1]);
      const MatrixXd phi = solver.solve(q);
      MatrixXd y(data_dof(mesh, basis), 2);
      for (Eigen::Index i = 0; i < y.size(); ++i)
        y(i % y.rows(), i / y.rows()) = rng.gauss();

      const VectorXd g = adjoint_gradient(mesh, fields, solver, phi, y);
      const auto J = jacobian(mesh, fields, solver, phi);
      const VectorXd g_exp = J.m.transpose() * flat(y);
      REQUIRE((g - g_exp).norm() <= 1e-10 * g_exp.norm());
    }
  }
  // r = 0 -> zero gradient
  const auto mesh = build_rect_mesh(8.0, 8.0, 3, 3);
  const auto fields = OpticalFields::homogeneous(mesh, 0.01, 2.0);
  DiffusionSolver solver(mesh, fields);
  const MatrixXd phi =
      solver.solve(MatrixXd(assemble_source(mesh, two_sources(mesh)[0])));
  const MatrixXd y0 = MatrixXd::Zero(mesh.node_count(), 1);
  CHECK(adjoint_gradient(mesh, fields, solver, phi, y0).norm() == 0.0);
}

TEST_CASE("data-fit gradient vanishes at an exact fit") {
  const auto mesh = build_rect_mesh(10.0, 10.0, 4, 4);
  const auto sources = two_sources(mesh);
  Rng rng(307);
  const auto f = random_fields(mesh, rng);
  const VectorXd x = stack_params(f.mu_a, f.mu_s_prime);
  const MatrixXd data = forward_data(mesh, f, sources);
  const VectorXd w = VectorXd::Ones(data.rows());
  for (const bool lp : {false, true})
    for (const bool ld : {false, true}) {
      const VectorXd g =
          data_fit_gradient(mesh, sources, ParamBasis::Nodal, x, data, w,
                            TransformConfig{lp, ld});
      CHECK(g.norm() == 0.0);
    }
}

TEST_CASE("log transform pushes: identities and errors") {
  const auto mesh = build_rect_mesh(8.0, 8.0, 3, 3);
  const auto sources = two_sources(mesh);
  Rng rng(401);
  const auto f = random_fields(mesh, rng);
  const VectorXd x = stack_params(f.mu_a, f.mu_s_prime);
  const auto J0 = analytic_jacobian(mesh, x, ParamBasis::Nodal, sources, {});

  auto J = J0;
  log_param_push(J, VectorXd::Ones(x.size()));
  CHECK(J.m == J0.m);
  CHECK(J.log_param);
  CHECK_THROWS_AS(log_param_push(J, VectorXd::Ones(x.size())), InvalidState);

  auto J2 = J0;
  log_param_push(J2, VectorXd::Constant(x.size(), 2.0));
  CHECK((J2.m - 2.0 * J0.m).norm() <= 1e-14 * J0.m.norm());

  auto J3 = J0;
  VectorXd bad = VectorXd::Ones(x.size());
  bad[0] = -1.0;
  CHECK_THROWS_AS(log_param_push(J3, bad), std::domain_error);

  auto J4 = J0;
  const Eigen::Index rows = J0.m.rows();
  log_data_push(J4, VectorXd::Ones(rows));
  CHECK(J4.m == J0.m);
  auto J5 = J0;
  log_data_push(J5, VectorXd::Constant(rows, 4.0));
  CHECK((J5.m - J0.m / 4.0).norm() <= 1e-14 * J0.m.norm());
  CHECK_THROWS_AS(log_data_push(J5, VectorXd::Ones(rows)), InvalidState);

  // floor engages on near-zero data rows and is counted
  auto J6 = J0;
  VectorXd fx = VectorXd::Ones(rows);
  fx[3] = 1e-15;
  log_data_push(J6, fx);
  CHECK(J6.floored_rows == 1);
  CHECK(std::isfinite(J6.m.norm()));
}

TEST_CASE("hvp agrees with a dense finite-difference Hessian") {
  const auto mesh = build_rect_mesh(8.0, 8.0, 3, 3);
  const auto sources = two_sources(mesh);
  Rng rng(503);
  const auto f = random_fields(mesh, rng);
  const VectorXd x = stack_params(f.mu_a, f.mu_s_prime);
  // synthetic data from perturbed parameters so the residual is nonzero
  auto f2 = f;
  f2.mu_a *= 1.15;
  const MatrixXd data = forward_data(mesh, f2, sources);
  const VectorXd w = VectorXd::Constant(data.rows(), 3.0);

  for (const bool lp : {false, true}) {
    const TransformConfig tc{lp, false};
    auto grad = [&](const VectorXd& xx) {
      return data_fit_gradient(mesh, sources, ParamBasis::Nodal, xx, data, w, tc);
    };
    // oracle: dense Hessian, one FD column per parameter
    const Eigen::Index n = x.size();
    MatrixXd H(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      VectorXd e = VectorXd::Zero(n);
      e[j] = 1.0;
      const double eps = std::sqrt(std::numeric_limits<double>::epsilon()) *
                         (1.0 + x.lpNorm<Eigen::Infinity>());
      H.col(j) = (grad(x + eps * e) - grad(x - eps * e)) / (2 * eps);
    }
    for (int trial = 0; trial < 3; ++trial) {
      VectorXd v(n);
      for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.gauss();
      const VectorXd hv = hvp(mesh, sources, ParamBasis::Nodal, x, v, data, w, tc);
      REQUIRE((hv - H * v).norm() <= 1e-4 * (H * v).norm());
    }
  }
}

TEST_CASE("hvp is exact on a quadratic surrogate") {
  const auto mesh = build_rect_mesh(8.0, 8.0, 3, 3);
  const auto sources = two_sources(mesh);
  Rng rng(601);
  const auto f = random_fields(mesh, rng);
  const VectorXd x = stack_params(f.mu_a, f.mu_s_prime);
  const auto J = analytic_jacobian(mesh, x, ParamBasis::Nodal, sources, {});
  const MatrixXd A = J.m.transpose() * J.m;  // Gauss-Newton matrix, W = I
  auto grad = [&](const VectorXd& xx) -> VectorXd { return A * (xx - x); };
  VectorXd v(x.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.gauss();
  const VectorXd hv = hvp_central(grad, x, v, false);
  REQUIRE((hv - A * v).norm() <= 1e-6 * (A * v).norm());

  CHECK(hvp_central(grad, x, VectorXd::Zero(x.size()), false).norm() == 0.0);
}

TEST_CASE("hvp is symmetric as a bilinear form") {
  const auto mesh = build_rect_mesh(8.0, 8.0, 3, 3);
  const auto sources = two_sources(mesh);
  Rng rng(701);
  const auto f = random_fields(mesh, rng);
  const VectorXd x = stack_params(f.mu_a, f.mu_s_prime);
  auto f2 = f;
  f2.mu_s_prime *= 1.1;
  const MatrixXd data = forward_data(mesh, f2, sources);
  const VectorXd w = VectorXd::Ones(data.rows());
  VectorXd u(x.size()), v(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    u[i] = rng.gauss();
    v[i] = rng.gauss();
  }
  const double a = v.dot(hvp(mesh, sources, ParamBasis::Nodal, x, u, data, w));
  const double b = u.dot(hvp(mesh, sources, ParamBasis::Nodal, x, v, data, w));
  CHECK_THAT(a, WithinRel(b, 1e-4));
}

TEST_CASE("stale factorization is rejected") {
  const auto mesh = build_rect_mesh(8.0, 8.0, 3, 3);
  const auto fields = OpticalFields::homogeneous(mesh, 0.01, 2.0);
  DiffusionSolver solver(mesh, fields);
  const MatrixXd phi =
      solver.solve(MatrixXd(assemble_source(mesh, two_sources(mesh)[0])));
  auto changed = fields;
  changed.mu_a[2] *= 1.01;
  CHECK_THROWS_AS(jacobian(mesh, changed, solver, phi), InvalidState);
  const MatrixXd y = MatrixXd::Ones(mesh.node_count(), 1);
  CHECK_THROWS_AS(adjoint_gradient(mesh, changed, solver, phi, y), InvalidState);
}
