#pragma once

// Random ellipse phantoms: uniform background draws, overlapping ellipse
// inclusions with multiplicative contrast, proportional nodal noise, and a
// Gaussian blur applied on the pixel grid. All draws come from one seeded
// stream in a fixed order, so a seed pins the phantom bit-exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "qpat/forward.hpp"
#include "qpat/mesh.hpp"
#include "qpat/rng.hpp"

namespace qpat {

struct Ellipse {
  double cx = 0, cy = 0;      // center
  double ax = 1, ay = 1;      // semi-axes
  double angle = 0;           // rotation, radians
  double contrast = 1;        // multiplies the background value

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / ax;
    const double v = (-s * dx + c * dy) / ay;
    return u * u + v * v <= 1.0;
  }
};

struct PhantomSpec {
  double mua_lo = 0.0085, mua_hi = 0.0115;  // background ranges, 1/mm
  double mus_lo = 1.7, mus_hi = 2.6;
  int inclusions_lo = 1, inclusions_hi = 3;       // per parameter
  double contrast_lo = 0.2, contrast_hi = 3.5;    // absorption inclusions
  double mus_contrast_lo = 0.2, mus_contrast_hi = 3.5;
  double semiaxis_lo = 1.5, semiaxis_hi = 6.0;    // mm
  double noise_std = 0.02;     // fraction of the nodal amplitude
  double blur_sigma_px = 1.0;  // Gaussian blur std on the pixel grid
  std::uint32_t grid_rows = 72, grid_cols = 72;
  double g = 0.9;              // anisotropy carried on the output fields
  double value_floor = 1e-4;   // positive clamp after noise and blur
  std::uint64_t seed = 0;

  void validate() const {
    auto ordered = [](double lo, double hi) { return lo <= hi && lo > 0.0; };
    if (!ordered(mua_lo, mua_hi) || !ordered(mus_lo, mus_hi) ||
        !ordered(contrast_lo, contrast_hi) ||
        !ordered(mus_contrast_lo, mus_contrast_hi) ||
        !ordered(semiaxis_lo, semiaxis_hi))
      throw std::invalid_argument("phantom spec: ranges must be ordered and positive");
    if (inclusions_lo < 0 || inclusions_hi < inclusions_lo)
      throw std::invalid_argument("phantom spec: bad inclusion count range");
    if (noise_std < 0.0 || blur_sigma_px < 0.0)
      throw std::invalid_argument("phantom spec: negative noise or blur");
    if (grid_rows < 2 || grid_cols < 2)
      throw std::invalid_argument("phantom spec: grid too small");
    if (!(value_floor > 0.0))
      throw std::invalid_argument("phantom spec: need a positive value floor");
    if (!(g > -1.0 && g < 1.0))
      throw std::invalid_argument("phantom spec: anisotropy outside (-1, 1)");
  }
};

struct PhantomRecord {
  OpticalFields fields;  // nodal basis
  double bg_mua = 0, bg_mus = 0;
  std::vector<Ellipse> mua_inclusions, mus_inclusions;
};

namespace detail {

// later draws overwrite earlier ones where ellipses overlap
inline double phantom_value(double x, double y, double background,
                            const std::vector<Ellipse>& inclusions) {
  double v = background;
  for (const auto& e : inclusions)
    if (e.contains(x, y)) v = background * e.contrast;
  return v;
}

inline std::vector<Ellipse> draw_ellipses(Rng& rng, const TriMesh& mesh,
                                          const PhantomSpec& spec,
                                          double contrast_lo,
                                          double contrast_hi) {
  const int n = spec.inclusions_lo +
                int(rng.uniform_index(
                    std::uint64_t(spec.inclusions_hi - spec.inclusions_lo + 1)));
  std::vector<Ellipse> out(static_cast<std::size_t>(n));
  for (auto& e : out) {
    e.cx = rng.uniform(mesh.x0, mesh.x0 + mesh.width);
    e.cy = rng.uniform(mesh.y0, mesh.y0 + mesh.height);
    e.ax = rng.uniform(spec.semiaxis_lo, spec.semiaxis_hi);
    e.ay = rng.uniform(spec.semiaxis_lo, spec.semiaxis_hi);
    e.angle = rng.uniform(0.0, 3.14159265358979323846);
    e.contrast = rng.uniform(contrast_lo, contrast_hi);
  }
  return out;
}

}  // namespace detail

// separable Gaussian blur with border renormalization (truncated kernel
// weights rescaled to sum to one), in place on a row-major image
inline void gaussian_blur_grid(VectorXd& img, std::uint32_t rows,
                               std::uint32_t cols, double sigma) {
  if (img.size() != Eigen::Index(rows) * Eigen::Index(cols))
    throw std::invalid_argument("blur: image size mismatch");
  if (sigma <= 0.0) return;
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> w(std::size_t(2 * radius + 1));
  for (int j = -radius; j <= radius; ++j)
    w[std::size_t(j + radius)] = std::exp(-0.5 * j * j / (sigma * sigma));

  VectorXd tmp(img.size());
  auto pass = [&](const VectorXd& src, VectorXd& dst, bool along_cols) {
    const int nr = int(rows), nc = int(cols);
    for (int r = 0; r < nr; ++r)
      for (int c = 0; c < nc; ++c) {
        double acc = 0, wsum = 0;
        for (int j = -radius; j <= radius; ++j) {
          const int rr = along_cols ? r : r + j;
          const int cc = along_cols ? c + j : c;
          if (rr < 0 || rr >= nr || cc < 0 || cc >= nc) continue;
          const double wj = w[std::size_t(j + radius)];
          acc += wj * src[rr * nc + cc];
          wsum += wj;
        }
        dst[r * nc + c] = acc / wsum;
      }
  };
  pass(img, tmp, true);
  pass(tmp, img, false);
}

inline PhantomRecord gen_phantom(const TriMesh& mesh, const PhantomSpec& spec,
                                 std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  PhantomRecord rec;
  rec.bg_mua = rng.uniform(spec.mua_lo, spec.mua_hi);
  rec.bg_mus = rng.uniform(spec.mus_lo, spec.mus_hi);
  rec.mua_inclusions = detail::draw_ellipses(rng, mesh, spec, spec.contrast_lo,
                                             spec.contrast_hi);
  rec.mus_inclusions = detail::draw_ellipses(
      rng, mesh, spec, spec.mus_contrast_lo, spec.mus_contrast_hi);

  const Eigen::Index n = Eigen::Index(mesh.node_count());
  OpticalFields& f = rec.fields;
  f.basis = ParamBasis::Nodal;
  f.g = spec.g;
  f.mu_a.resize(n);
  f.mu_s_prime.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = mesh.nodes[std::size_t(i)][0];
    const double y = mesh.nodes[std::size_t(i)][1];
    f.mu_a[i] = detail::phantom_value(x, y, rec.bg_mua, rec.mua_inclusions);
    f.mu_s_prime[i] =
        detail::phantom_value(x, y, rec.bg_mus, rec.mus_inclusions);
  }
  if (spec.noise_std > 0.0) {
    for (Eigen::Index i = 0; i < n; ++i)
      f.mu_a[i] *= 1.0 + spec.noise_std * rng.gauss();
    for (Eigen::Index i = 0; i < n; ++i)
      f.mu_s_prime[i] *= 1.0 + spec.noise_std * rng.gauss();
  }
  if (spec.blur_sigma_px > 0.0) {
    const auto grid = PixelGrid::covering(mesh, spec.grid_rows, spec.grid_cols);
    const GridMapper mapper(mesh, grid);
    for (VectorXd* field : {&f.mu_a, &f.mu_s_prime}) {
      VectorXd img = mapper.embed(*field);
      gaussian_blur_grid(img, spec.grid_rows, spec.grid_cols,
                         spec.blur_sigma_px);
      *field = mapper.extract(img);
    }
  }
  f.mu_a = f.mu_a.cwiseMax(spec.value_floor);
  f.mu_s_prime = f.mu_s_prime.cwiseMax(spec.value_floor);
  return rec;
}

inline PhantomRecord gen_phantom(const TriMesh& mesh, const PhantomSpec& spec) {
  return gen_phantom(mesh, spec, spec.seed);
}

// per-element means of nodal fields, for transport simulation
inline OpticalFields to_element_fields(const TriMesh& mesh,
                                       const OpticalFields& nodal) {
  if (nodal.basis != ParamBasis::Nodal)
    throw std::invalid_argument("to_element_fields: input must be nodal");
  OpticalFields f;
  f.basis = ParamBasis::Element;
  f.g = nodal.g;
  const Eigen::Index ne = Eigen::Index(mesh.element_count());
  f.mu_a.resize(ne);
  f.mu_s_prime.resize(ne);
  for (Eigen::Index e = 0; e < ne; ++e) {
    const auto& el = mesh.elements[std::size_t(e)];
    f.mu_a[e] = (nodal.mu_a[el[0]] + nodal.mu_a[el[1]] + nodal.mu_a[el[2]]) / 3.0;
    f.mu_s_prime[e] = (nodal.mu_s_prime[el[0]] + nodal.mu_s_prime[el[1]] +
                       nodal.mu_s_prime[el[2]]) / 3.0;
  }
  return f;
}

struct NoisyData {
  MatrixXd h;      // data with additive proportional Gaussian noise
  MatrixXd sigma;  // per-entry noise std, ready for NoiseWeighting
};

inline NoisyData add_data_noise(const MatrixXd& h, double level,
                                std::uint64_t seed) {
  if (level < 0.0) throw std::invalid_argument("data noise: negative level");
  NoisyData out;
  out.h = h;
  out.sigma = MatrixXd::Zero(h.rows(), h.cols());
  if (level == 0.0) return out;
  // tiny floor keeps the stds usable as inverse weights even where h ~ 0
  const double floor = 1e-6 * h.cwiseAbs().maxCoeff();
  Rng rng(seed);
  for (Eigen::Index c = 0; c < h.cols(); ++c)
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      const double s = level * std::max(std::abs(h(i, c)), floor);
      out.sigma(i, c) = s;
      out.h(i, c) += s * rng.gauss();
    }
  return out;
}

}  // namespace qpat
