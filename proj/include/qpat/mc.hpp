#pragma once

// 2-D Monte-Carlo photon-packet transport on the FEM triangulation. Photons
// carry a statistical weight, deposit the absorbed fraction mu_a/mu_t at
// every collision into the containing element, scatter with the 2-D
// Henyey-Greenstein (wrapped-Cauchy) phase function, and terminate on the
// matched boundary or by Russian roulette. The element walk traces rays
// through the shared FEM mesh, so tallies live exactly on the inversion
// geometry. Batches own independent seeded streams and are merged in batch
// order, making results independent of the thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "qpat/common.hpp"
#include "qpat/forward.hpp"
#include "qpat/mesh.hpp"
#include "qpat/parallel.hpp"
#include "qpat/rng.hpp"

namespace qpat {

// boundary-source angular profile: collimated photons enter along the inward
// normal; cosine enters with a cos-weighted lobe, the angular shape assumed by
// the diffusion flux boundary condition
enum class LaunchProfile { Collimated, Cosine };

struct MCConfig {
  std::uint64_t photons = 10000000;
  double weight_threshold = 1e-4;  // roulette below this packet weight
  double survival = 0.1;           // roulette survival probability
  LaunchProfile launch = LaunchProfile::Collimated;
  std::uint64_t seed = 0;
  std::uint64_t batch_size = 16384;

  void validate() const {
    if (photons < 1) throw std::invalid_argument("mc: need photons >= 1");
    if (!(survival > 0.0 && survival < 1.0))
      throw std::invalid_argument("mc: survival probability outside (0, 1)");
    if (!(weight_threshold > 0.0))
      throw std::invalid_argument("mc: need a positive weight threshold");
    if (batch_size < 1) throw std::invalid_argument("mc: empty batch");
  }
};

struct MCResult {
  VectorXd h;        // absorbed energy density per element, deposit / area
  VectorXd fluence;  // deposit / (mu_a * area); zero where mu_a is zero
  double launched = 0, deposited = 0, escaped = 0;
  double roulette_gain = 0, roulette_loss = 0;
  std::uint64_t photons = 0;

  // exact-bookkeeping residual; zero up to rounding of the accumulators
  double balance() const {
    return launched + roulette_gain - roulette_loss - deposited - escaped;
  }
};

namespace detail {

struct McElement {
  double nx[3], ny[3], c[3];  // outward edge normals (unnormalized), offsets
  std::int32_t nbr[3];
  double inv_mu_t, absorb;  // 1/mu_t and mu_a/mu_t
};

inline std::vector<McElement> mc_geometry(const TriMesh& mesh,
                                          const OpticalFields& fields) {
  if (fields.basis != ParamBasis::Element)
    throw std::invalid_argument("mc: fields must be element-constant");
  fields.validate(mesh);
  const VectorXd mu_s = fields.mu_s();
  const auto& nb = mesh.neighbors();
  std::vector<McElement> out(mesh.element_count());
  for (std::size_t e = 0; e < mesh.element_count(); ++e) {
    McElement& g = out[e];
    const auto& el = mesh.elements[e];
    for (int k = 0; k < 3; ++k) {
      const auto& a = mesh.nodes[el[k]];
      const auto& b = mesh.nodes[el[(k + 1) % 3]];
      // right-hand normal of a CCW edge points out of the triangle
      g.nx[k] = b[1] - a[1];
      g.ny[k] = a[0] - b[0];
      g.c[k] = g.nx[k] * a[0] + g.ny[k] * a[1];
      g.nbr[k] = nb[e][k];
    }
    const double mu_a = fields.mu_a[Eigen::Index(e)];
    const double mu_t = mu_a + mu_s[Eigen::Index(e)];
    g.inv_mu_t = 1.0 / mu_t;
    g.absorb = mu_a / mu_t;
  }
  return out;
}

struct Photon {
  double x, y, dx, dy;
  std::int32_t element;
};

// optical depth to the next collision, guarding the measure-zero zero draw
inline double sample_tau(Rng& rng) {
  double u;
  do {
    u = rng.uniform();
  } while (u <= 0.0);
  return -std::log(u);
}

// uniform unit direction without transcendentals (double-angle trick)
inline void isotropic_direction(Rng& rng, double& dx, double& dy) {
  for (;;) {
    const double u = 2.0 * rng.uniform() - 1.0;
    const double v = 2.0 * rng.uniform() - 1.0;
    const double s = u * u + v * v;
    if (s > 1.0 || s == 0.0) continue;
    dx = (u * u - v * v) / s;
    dy = 2.0 * u * v / s;
    return;
  }
}

// 2-D Henyey-Greenstein scattering rotation: tan(theta/2) is Cauchy-scaled
inline void hg_rotate(Rng& rng, double g_factor, double& dx, double& dy) {
  const double t = g_factor * std::tan(3.14159265358979323846 * (rng.uniform() - 0.5));
  const double t2 = t * t;
  double ct, st;
  if (t2 > 1e300) {
    ct = -1.0;
    st = 0.0;
  } else {
    ct = (1.0 - t2) / (1.0 + t2);
    st = 2.0 * t / (1.0 + t2);
  }
  const double nx = dx * ct - dy * st;
  const double ny = dx * st + dy * ct;
  dx = nx;
  dy = ny;
}

struct BatchTally {
  VectorXd deposit;
  double launched = 0, deposited = 0, escaped = 0;
  double roulette_gain = 0, roulette_loss = 0;
};

// one packet from launch to termination; weight starts at 1
template <typename GeomVec>
inline void trace_photon(const GeomVec& geo, Photon p, Rng& rng,
                         const MCConfig& cfg, double g_factor, bool isotropic,
                         BatchTally& tally) {
  double w = 1.0;
  double tau = sample_tau(rng);
  for (std::uint64_t step = 0; step < 10000000; ++step) {
    const auto& e = geo[std::size_t(p.element)];
    // nearest exit through an edge the direction actually crosses
    double t_exit = std::numeric_limits<double>::infinity();
    int k_exit = -1;
    for (int k = 0; k < 3; ++k) {
      const double along = e.nx[k] * p.dx + e.ny[k] * p.dy;
      if (along <= 0.0) continue;
      const double t = (e.c[k] - (e.nx[k] * p.x + e.ny[k] * p.y)) / along;
      const double tc = t < 0.0 ? 0.0 : t;
      if (tc < t_exit) {
        t_exit = tc;
        k_exit = k;
      }
    }
    if (k_exit < 0)
      throw NumericalError("mc: element walk lost a photon at (" +
                           std::to_string(p.x) + ", " + std::to_string(p.y) +
                           ") in element " + std::to_string(p.element));
    const double s_collide = tau * e.inv_mu_t;
    if (s_collide < t_exit) {
      // collision: deposit the absorbed fraction, then scatter
      p.x += s_collide * p.dx;
      p.y += s_collide * p.dy;
      const double w_dep = w * e.absorb;
      const double w_next = w - w_dep;
      tally.deposit[p.element] += w - w_next;
      tally.deposited += w - w_next;
      w = w_next;
      if (w < cfg.weight_threshold) {
        if (rng.uniform() < cfg.survival) {
          const double boosted = w / cfg.survival;
          tally.roulette_gain += boosted - w;
          w = boosted;
        } else {
          tally.roulette_loss += w;
          return;
        }
      }
      if (isotropic)
        isotropic_direction(rng, p.dx, p.dy);
      else
        hg_rotate(rng, g_factor, p.dx, p.dy);
      tau = sample_tau(rng);
    } else {
      // crossing: spend the traversed optical depth, move to the neighbor
      p.x += t_exit * p.dx;
      p.y += t_exit * p.dy;
      tau -= t_exit / e.inv_mu_t;
      const std::int32_t n = e.nbr[k_exit];
      if (n < 0) {
        tally.escaped += w;  // matched boundary: no internal reflection
        return;
      }
      p.element = n;
    }
  }
  throw NumericalError("mc: photon exceeded the step budget");
}

template <typename Launcher>
inline MCResult mc_run(const TriMesh& mesh, const OpticalFields& fields,
                       double total_power, const MCConfig& cfg,
                       const Launcher& launch) {
  cfg.validate();
  const auto geo = mc_geometry(mesh, fields);
  const double g_factor = (1.0 - fields.g) / (1.0 + fields.g);
  const bool isotropic = fields.g == 0.0;

  const std::uint64_t batches =
      (cfg.photons + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<BatchTally> tallies(batches);
  const Rng root(cfg.seed);
  parallel_for(std::size_t(batches), [&](std::size_t b) {
    BatchTally& tally = tallies[b];
    tally.deposit.setZero(Eigen::Index(mesh.element_count()));
    Rng rng = root.child(std::uint64_t(b));
    const std::uint64_t lo = std::uint64_t(b) * cfg.batch_size;
    const std::uint64_t hi = std::min(cfg.photons, lo + cfg.batch_size);
    for (std::uint64_t i = lo; i < hi; ++i) {
      Photon p = launch(rng);
      tally.launched += 1.0;
      trace_photon(geo, p, rng, cfg, g_factor, isotropic, tally);
    }
  });

  MCResult out;
  out.photons = cfg.photons;
  out.h.setZero(Eigen::Index(mesh.element_count()));
  for (const auto& t : tallies) {
    out.h += t.deposit;
    out.launched += t.launched;
    out.deposited += t.deposited;
    out.escaped += t.escaped;
    out.roulette_gain += t.roulette_gain;
    out.roulette_loss += t.roulette_loss;
  }
  const double scale = total_power / double(cfg.photons);
  out.launched *= scale;
  out.deposited *= scale;
  out.escaped *= scale;
  out.roulette_gain *= scale;
  out.roulette_loss *= scale;
  out.fluence.setZero(out.h.size());
  for (Eigen::Index e = 0; e < out.h.size(); ++e) {
    const double area = mesh.area(std::size_t(e));
    const double dep = out.h[e] * scale;
    out.h[e] = dep / area;
    const double mu_a = fields.mu_a[e];
    out.fluence[e] = mu_a > 0.0 ? dep / (mu_a * area) : 0.0;
  }
  return out;
}

}  // namespace detail

// boundary launch: position on the source edges with density proportional to
// the linear intensity profile, direction the inward edge normal (collimated)
inline MCResult mc_simulate(const TriMesh& mesh, const OpticalFields& fields,
                            const SourceSpec& source, const MCConfig& cfg) {
  source.validate(mesh);
  if (!source.has_power())
    throw std::invalid_argument("mc: source carries no power");

  struct LaunchEdge {
    double ax, ay, bx, by;   // endpoints
    double nx, ny;           // inward unit normal
    double i1, i2;           // nodal intensities
    double cum;              // cumulative power
    std::int32_t element;
  };
  std::vector<LaunchEdge> edges;
  double total = 0;
  for (const auto& be : mesh.boundary_edges) {
    bool active = false;
    for (const auto& s : source.segments)
      if (mesh.label_index(s) == int(be.label)) active = true;
    if (!active) continue;
    LaunchEdge le;
    le.ax = mesh.nodes[be.a][0];
    le.ay = mesh.nodes[be.a][1];
    le.bx = mesh.nodes[be.b][0];
    le.by = mesh.nodes[be.b][1];
    const double ex = le.bx - le.ax, ey = le.by - le.ay;
    const double len = std::hypot(ex, ey);
    // boundary runs CCW, so the domain lies to the left of a -> b
    le.nx = -ey / len;
    le.ny = ex / len;
    le.i1 = source.intensity[be.a];
    le.i2 = source.intensity[be.b];
    le.element = std::int32_t(be.element);
    const double power = len * 0.5 * (le.i1 + le.i2);
    if (power <= 0.0) continue;
    total += power;
    le.cum = total;
    edges.push_back(le);
  }
  if (edges.empty())
    throw std::invalid_argument("mc: no source edges with power");

  const bool cosine = cfg.launch == LaunchProfile::Cosine;
  auto launch = [&edges, total, cosine](Rng& rng) {
    const double target = rng.uniform() * total;
    std::size_t lo = 0, hi = edges.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (edges[mid].cum <= target)
        lo = mid + 1;
      else
        hi = mid;
    }
    const LaunchEdge& e = edges[lo];
    // inverse CDF of the linear density i1 + (i2 - i1) s on [0, 1]
    const double xi = rng.uniform();
    const double di = e.i2 - e.i1, si = e.i1 + e.i2;
    double s;
    if (std::abs(di) <= 1e-12 * si)
      s = xi;
    else
      s = (-e.i1 + std::sqrt(e.i1 * e.i1 + xi * di * si)) / di;
    detail::Photon p;
    p.x = e.ax + s * (e.bx - e.ax);
    p.y = e.ay + s * (e.by - e.ay);
    if (cosine) {
      const double sin_t = 2.0 * rng.uniform() - 1.0;
      const double cos_t = std::sqrt(1.0 - sin_t * sin_t);
      // tangent chosen so (normal, tangent) is a right-handed frame
      p.dx = cos_t * e.nx - sin_t * e.ny;
      p.dy = cos_t * e.ny + sin_t * e.nx;
    } else {
      p.dx = e.nx;
      p.dy = e.ny;
    }
    p.element = e.element;
    return p;
  };
  return detail::mc_run(mesh, fields, total, cfg, launch);
}

// isotropic interior point launch, used for free-space validation runs
inline MCResult mc_simulate_point(const TriMesh& mesh,
                                  const OpticalFields& fields, double x,
                                  double y, double power, const MCConfig& cfg) {
  const std::int64_t e = mesh.locate(x, y);
  if (e < 0)
    throw std::invalid_argument("mc: point source outside the mesh");
  if (!(power > 0.0)) throw std::invalid_argument("mc: need positive power");
  auto launch = [&, e](Rng& rng) {
    detail::Photon p;
    p.x = x;
    p.y = y;
    p.element = std::int32_t(e);
    detail::isotropic_direction(rng, p.dx, p.dy);
    return p;
  };
  return detail::mc_run(mesh, fields, power, cfg, launch);
}

}  // namespace qpat
