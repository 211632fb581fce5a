#pragma once

// Reconstruction datasets: phantoms drawn on a fine generation mesh, forward
// data simulated there (diffusion FEM or Monte Carlo), then truth and data
// resampled onto the reconstruction mesh. A dataset is a single container
// file holding the reconstruction mesh, all samples, and the split indices.

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "qpat/blockfile.hpp"
#include "qpat/forward.hpp"
#include "qpat/mc.hpp"
#include "qpat/phantom.hpp"
#include "qpat/sensitivity.hpp"

namespace qpat {

// nodal field on `src` evaluated at the nodes of `dst` by barycentric
// interpolation; dst must lie inside the src domain (up to rounding)
inline VectorXd resample_nodal(const TriMesh& src, const VectorXd& field,
                               const TriMesh& dst) {
  if (std::size_t(field.size()) != src.node_count())
    throw std::invalid_argument("resample_nodal: field length != node count");
  VectorXd out(Eigen::Index(dst.node_count()));
  for (std::size_t i = 0; i < dst.node_count(); ++i) {
    double x = dst.nodes[i][0], y = dst.nodes[i][1];
    x = std::clamp(x, src.x0, src.x0 + src.width);
    y = std::clamp(y, src.y0, src.y0 + src.height);
    const std::int64_t e = src.locate(x, y);
    if (e < 0)
      throw std::invalid_argument("resample_nodal: node outside source mesh");
    auto l = src.barycentric(std::size_t(e), x, y);
    double s = 0;
    for (double& w : l) {
      w = std::max(w, 0.0);
      s += w;
    }
    const auto& t = src.elements[std::size_t(e)];
    out[Eigen::Index(i)] =
        (l[0] * field[t[0]] + l[1] * field[t[1]] + l[2] * field[t[2]]) / s;
  }
  return out;
}

// element-constant field -> nodal by area-weighted averaging over the
// elements incident to each node (lumped L2 projection)
inline VectorXd element_to_nodal(const TriMesh& mesh, const VectorXd& values) {
  if (std::size_t(values.size()) != mesh.element_count())
    throw std::invalid_argument("element_to_nodal: length != element count");
  VectorXd num = VectorXd::Zero(Eigen::Index(mesh.node_count()));
  VectorXd den = VectorXd::Zero(Eigen::Index(mesh.node_count()));
  for (std::size_t e = 0; e < mesh.element_count(); ++e) {
    const auto& t = mesh.elements[e];
    const auto& p0 = mesh.nodes[t[0]];
    const auto& p1 = mesh.nodes[t[1]];
    const auto& p2 = mesh.nodes[t[2]];
    const double area = 0.5 * std::abs((p1[0] - p0[0]) * (p2[1] - p0[1]) -
                                       (p2[0] - p0[0]) * (p1[1] - p0[1]));
    for (int k = 0; k < 3; ++k) {
      num[t[k]] += area / 3.0 * values[Eigen::Index(e)];
      den[t[k]] += area / 3.0;
    }
  }
  return num.cwiseQuotient(den);
}

// mesh-independent illumination description; instantiated per mesh
struct SourceDef {
  std::string segment;
  double power = 1.0;
};

inline std::vector<SourceSpec> instantiate_sources(
    const TriMesh& mesh, const std::vector<SourceDef>& defs) {
  std::vector<SourceSpec> out;
  out.reserve(defs.size());
  for (const auto& d : defs)
    out.push_back(make_uniform_source(mesh, d.segment, d.power));
  return out;
}

inline std::vector<SourceDef> default_sources() {
  return {{"bottom", 1.0}, {"right", 1.0}, {"top", 1.0}, {"left", 1.0}};
}

enum class ForwardBackend { DiffusionFem, MonteCarlo };

// initial iterate policy: one homogeneous guess shared by every sample (the
// mean background over the training split) or a per-sample perturbation of
// the sample's own background
enum class InitPolicy { DatasetMean, PerturbedBackground };

struct DatasetConfig {
  std::size_t samples = 1250;
  double noise_level = 0.01;  // proportional Gaussian measurement noise
  std::uint64_t seed = 0;
  ForwardBackend backend = ForwardBackend::DiffusionFem;
  MCConfig mc;  // photon budget etc. for the MonteCarlo backend
  InitPolicy init = InitPolicy::DatasetMean;
  double init_perturbation = 0.3;  // relative, PerturbedBackground only
  double train_fraction = 0.8, val_fraction = 0.1;  // remainder is test

  void validate() const {
    if (samples < 1) throw std::invalid_argument("dataset: need samples >= 1");
    if (noise_level < 0.0)
      throw std::invalid_argument("dataset: negative noise level");
    if (!(train_fraction >= 0.0 && val_fraction >= 0.0 &&
          train_fraction + val_fraction <= 1.0))
      throw std::invalid_argument("dataset: bad split fractions");
    if (!(init_perturbation >= 0.0 && init_perturbation < 1.0))
      throw std::invalid_argument("dataset: perturbation outside [0, 1)");
    if (backend == ForwardBackend::MonteCarlo) mc.validate();
  }
};

struct SplitIndices {
  std::vector<std::uint32_t> train, val, test;
};

// seeded shuffle, then contiguous train / val / test ranges; sizes are
// floor(n * fraction) with the remainder going to test
inline SplitIndices split_indices(std::size_t n, double train_fraction,
                                  double val_fraction, Rng rng) {
  std::vector<std::uint32_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = std::uint32_t(i);
  for (std::size_t i = n; i > 1; --i)
    std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  const std::size_t n_train = std::size_t(train_fraction * double(n));
  const std::size_t n_val = std::size_t(val_fraction * double(n));
  SplitIndices out;
  out.train.assign(perm.begin(), perm.begin() + std::ptrdiff_t(n_train));
  out.val.assign(perm.begin() + std::ptrdiff_t(n_train),
                 perm.begin() + std::ptrdiff_t(n_train + n_val));
  out.test.assign(perm.begin() + std::ptrdiff_t(n_train + n_val), perm.end());
  return out;
}

struct Sample {
  VectorXd truth;    // stacked [mu_a; mu_s'], nodal on the recon mesh
  MatrixXd h_clean;  // node count x illuminations, before measurement noise
  MatrixXd h_noisy;
  MatrixXd sigma;    // per-entry noise std; zero when noise_level == 0
  VectorXd x0;       // stacked initial iterate
  double bg_mua = 0, bg_mus = 0;
  std::uint64_t seed = 0;  // phantom seed
};

struct Dataset {
  TriMesh mesh;  // reconstruction mesh
  std::vector<SourceDef> source_defs;
  DatasetConfig config;
  std::vector<Sample> samples;
  std::vector<std::uint32_t> train, val, test;
  double mean_bg_mua = 0, mean_bg_mus = 0;  // over the training split

  std::vector<SourceSpec> sources() const {
    return instantiate_sources(mesh, source_defs);
  }
  Eigen::Index illuminations() const {
    return samples.empty() ? 0 : samples[0].h_clean.cols();
  }
};

inline Dataset dataset_build(const TriMesh& recon_mesh, const TriMesh& gen_mesh,
                             const PhantomSpec& spec,
                             const std::vector<SourceDef>& source_defs,
                             const DatasetConfig& cfg) {
  cfg.validate();
  spec.validate();
  if (source_defs.empty())
    throw std::invalid_argument("dataset: no illuminations given");
  const auto gen_sources = instantiate_sources(gen_mesh, source_defs);
  const Eigen::Index nd = Eigen::Index(recon_mesh.node_count());
  const Eigen::Index ni = Eigen::Index(gen_sources.size());

  Dataset ds;
  ds.mesh = recon_mesh;
  ds.source_defs = source_defs;
  ds.config = cfg;
  ds.samples.resize(cfg.samples);

  const Rng root(cfg.seed);
  std::vector<double> pert_mua(cfg.samples), pert_mus(cfg.samples);
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    Rng stream = root.child(i);
    Sample& s = ds.samples[i];
    s.seed = stream.next_u64();
    const std::uint64_t noise_seed = stream.next_u64();
    pert_mua[i] = stream.uniform(-cfg.init_perturbation, cfg.init_perturbation);
    pert_mus[i] = stream.uniform(-cfg.init_perturbation, cfg.init_perturbation);

    const PhantomRecord rec = gen_phantom(gen_mesh, spec, s.seed);
    s.bg_mua = rec.bg_mua;
    s.bg_mus = rec.bg_mus;
    s.truth = stack_params(resample_nodal(gen_mesh, rec.fields.mu_a, recon_mesh),
                           resample_nodal(gen_mesh, rec.fields.mu_s_prime,
                                          recon_mesh));

    MatrixXd h_gen(Eigen::Index(gen_mesh.node_count()), ni);
    if (cfg.backend == ForwardBackend::DiffusionFem) {
      h_gen = forward_data(gen_mesh, rec.fields, gen_sources);
    } else {
      const OpticalFields elem = to_element_fields(gen_mesh, rec.fields);
      for (Eigen::Index c = 0; c < ni; ++c) {
        MCConfig mc = cfg.mc;
        mc.seed = stream.next_u64();
        const MCResult res =
            mc_simulate(gen_mesh, elem, gen_sources[std::size_t(c)], mc);
        h_gen.col(c) = element_to_nodal(gen_mesh, res.h);
      }
    }
    s.h_clean.resize(nd, ni);
    for (Eigen::Index c = 0; c < ni; ++c)
      s.h_clean.col(c) = resample_nodal(gen_mesh, h_gen.col(c), recon_mesh);
    const NoisyData noisy = add_data_noise(s.h_clean, cfg.noise_level,
                                           noise_seed);
    s.h_noisy = noisy.h;
    s.sigma = noisy.sigma;
  }

  SplitIndices split = split_indices(cfg.samples, cfg.train_fraction,
                                     cfg.val_fraction, root.child(cfg.samples));
  ds.train = std::move(split.train);
  ds.val = std::move(split.val);
  ds.test = std::move(split.test);

  std::vector<std::uint32_t> all_ids(cfg.samples);
  for (std::size_t i = 0; i < cfg.samples; ++i) all_ids[i] = std::uint32_t(i);
  const auto& mean_ids = ds.train.empty() ? all_ids : ds.train;
  for (const std::uint32_t i : mean_ids) {
    ds.mean_bg_mua += ds.samples[i].bg_mua;
    ds.mean_bg_mus += ds.samples[i].bg_mus;
  }
  ds.mean_bg_mua /= double(mean_ids.size());
  ds.mean_bg_mus /= double(mean_ids.size());

  for (std::size_t i = 0; i < cfg.samples; ++i) {
    Sample& s = ds.samples[i];
    double mua0 = ds.mean_bg_mua, mus0 = ds.mean_bg_mus;
    if (cfg.init == InitPolicy::PerturbedBackground) {
      mua0 = s.bg_mua * (1.0 + pert_mua[i]);
      mus0 = s.bg_mus * (1.0 + pert_mus[i]);
    }
    s.x0 = stack_params(VectorXd::Constant(nd, mua0),
                        VectorXd::Constant(nd, mus0));
  }
  return ds;
}

namespace detail {

inline std::string backend_name(ForwardBackend b) {
  return b == ForwardBackend::DiffusionFem ? "da" : "mc";
}
inline ForwardBackend backend_from_name(const std::string& s) {
  if (s == "da") return ForwardBackend::DiffusionFem;
  if (s == "mc") return ForwardBackend::MonteCarlo;
  throw std::runtime_error("dataset: unknown backend '" + s + "'");
}
inline std::string init_name(InitPolicy p) {
  return p == InitPolicy::DatasetMean ? "dataset_mean" : "perturbed_background";
}
inline InitPolicy init_from_name(const std::string& s) {
  if (s == "dataset_mean") return InitPolicy::DatasetMean;
  if (s == "perturbed_background") return InitPolicy::PerturbedBackground;
  throw std::runtime_error("dataset: unknown init policy '" + s + "'");
}

inline std::vector<double> flatten_rows(
    const std::vector<Sample>& samples,
    const std::function<VectorXd(const Sample&)>& get) {
  std::vector<double> out;
  if (samples.empty()) return out;
  const std::size_t w = std::size_t(get(samples[0]).size());
  out.reserve(samples.size() * w);
  for (const auto& s : samples) {
    const VectorXd v = get(s);
    if (std::size_t(v.size()) != w)
      throw InvalidState("dataset: ragged sample arrays");
    out.insert(out.end(), v.data(), v.data() + v.size());
  }
  return out;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path,
                         const json& provenance = json::object()) {
  ContainerWriter w;
  w.header["kind"] = "qpat-dataset";
  w.header["schema_version"] = 1;
  w.header["samples"] = ds.samples.size();
  w.header["illuminations"] = ds.illuminations();
  w.header["noise_level"] = ds.config.noise_level;
  w.header["seed"] = ds.config.seed;
  w.header["backend"] = detail::backend_name(ds.config.backend);
  w.header["mc"] = {{"photons", ds.config.mc.photons},
                    {"weight_threshold", ds.config.mc.weight_threshold},
                    {"survival", ds.config.mc.survival},
                    {"launch", ds.config.mc.launch == LaunchProfile::Cosine
                                   ? "cosine"
                                   : "collimated"},
                    {"batch_size", ds.config.mc.batch_size}};
  w.header["init"] = detail::init_name(ds.config.init);
  w.header["init_perturbation"] = ds.config.init_perturbation;
  w.header["train_fraction"] = ds.config.train_fraction;
  w.header["val_fraction"] = ds.config.val_fraction;
  w.header["mean_bg"] = {ds.mean_bg_mua, ds.mean_bg_mus};
  json srcs = json::array();
  for (const auto& d : ds.source_defs)
    srcs.push_back({{"segment", d.segment}, {"power", d.power}});
  w.header["sources"] = std::move(srcs);
  w.header["mesh"] = {{"extent", {ds.mesh.x0, ds.mesh.y0, ds.mesh.width,
                                  ds.mesh.height}},
                      {"nx", ds.mesh.nx},
                      {"ny", ds.mesh.ny},
                      {"segment_labels", ds.mesh.segment_labels}};
  if (!provenance.empty()) w.header["provenance"] = provenance;

  const TriMesh& m = ds.mesh;
  std::vector<double> coords(m.node_count() * 2);
  for (std::size_t i = 0; i < m.node_count(); ++i) {
    coords[2 * i] = m.nodes[i][0];
    coords[2 * i + 1] = m.nodes[i][1];
  }
  std::vector<std::uint32_t> conn(m.element_count() * 3);
  for (std::size_t e = 0; e < m.element_count(); ++e)
    for (int k = 0; k < 3; ++k) conn[3 * e + k] = m.elements[e][k];
  std::vector<std::uint32_t> bnd(m.boundary_edges.size() * 3);
  for (std::size_t i = 0; i < m.boundary_edges.size(); ++i) {
    bnd[3 * i] = m.boundary_edges[i].a;
    bnd[3 * i + 1] = m.boundary_edges[i].b;
    bnd[3 * i + 2] = m.boundary_edges[i].label;
  }
  w.add_f64("mesh_coordinates", std::move(coords), {m.node_count(), 2});
  w.add_u32("mesh_elements", std::move(conn), {m.element_count(), 3});
  w.add_u32("mesh_boundary_edges", std::move(bnd),
            {m.boundary_edges.size(), 3});

  const std::size_t n = ds.samples.size();
  const std::size_t nd = m.node_count();
  const std::size_t data_w =
      n == 0 ? 0 : std::size_t(ds.samples[0].h_clean.size());
  auto flat_mat = [](const Sample& s, const MatrixXd& v) {
    (void)s;
    return VectorXd(Eigen::Map<const VectorXd>(v.data(), v.size()));
  };
  w.add_f64("truth",
            detail::flatten_rows(ds.samples,
                                 [](const Sample& s) { return s.truth; }),
            {n, 2 * nd});
  w.add_f64("data_clean",
            detail::flatten_rows(ds.samples,
                                 [&](const Sample& s) {
                                   return flat_mat(s, s.h_clean);
                                 }),
            {n, data_w});
  w.add_f64("data_noisy",
            detail::flatten_rows(ds.samples,
                                 [&](const Sample& s) {
                                   return flat_mat(s, s.h_noisy);
                                 }),
            {n, data_w});
  w.add_f64("noise_std",
            detail::flatten_rows(ds.samples,
                                 [&](const Sample& s) {
                                   return flat_mat(s, s.sigma);
                                 }),
            {n, data_w});
  w.add_f64("init",
            detail::flatten_rows(ds.samples,
                                 [](const Sample& s) { return s.x0; }),
            {n, 2 * nd});
  std::vector<double> bg(n * 2);
  std::vector<std::uint32_t> seeds(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    bg[2 * i] = ds.samples[i].bg_mua;
    bg[2 * i + 1] = ds.samples[i].bg_mus;
    seeds[2 * i] = std::uint32_t(ds.samples[i].seed >> 32);
    seeds[2 * i + 1] = std::uint32_t(ds.samples[i].seed & 0xffffffffull);
  }
  w.add_f64("background", std::move(bg), {n, 2});
  w.add_u32("sample_seeds", std::move(seeds), {n, 2});
  w.add_u32("split_train", ds.train, {ds.train.size()});
  w.add_u32("split_val", ds.val, {ds.val.size()});
  w.add_u32("split_test", ds.test, {ds.test.size()});
  w.write(path);
}

inline Dataset load_dataset(const std::string& path) {
  ContainerReader r(path);
  if (r.header.value("kind", "") != "qpat-dataset")
    throw std::runtime_error("not a dataset container: " + path);

  Dataset ds;
  const auto& mh = r.header.at("mesh");
  const auto ext = mh.at("extent");
  ds.mesh.x0 = ext[0];
  ds.mesh.y0 = ext[1];
  ds.mesh.width = ext[2];
  ds.mesh.height = ext[3];
  ds.mesh.nx = mh.value("nx", 0u);
  ds.mesh.ny = mh.value("ny", 0u);
  ds.mesh.segment_labels =
      mh.at("segment_labels").get<std::vector<std::string>>();
  const auto& coords = r.f64("mesh_coordinates");
  ds.mesh.nodes.resize(coords.size() / 2);
  for (std::size_t i = 0; i < ds.mesh.nodes.size(); ++i)
    ds.mesh.nodes[i] = {coords[2 * i], coords[2 * i + 1]};
  const auto& conn = r.u32("mesh_elements");
  ds.mesh.elements.resize(conn.size() / 3);
  for (std::size_t e = 0; e < ds.mesh.elements.size(); ++e)
    ds.mesh.elements[e] = {conn[3 * e], conn[3 * e + 1], conn[3 * e + 2]};
  const auto& bnd = r.u32("mesh_boundary_edges");
  ds.mesh.boundary_edges.resize(bnd.size() / 3);
  for (std::size_t i = 0; i < ds.mesh.boundary_edges.size(); ++i) {
    ds.mesh.boundary_edges[i].a = bnd[3 * i];
    ds.mesh.boundary_edges[i].b = bnd[3 * i + 1];
    ds.mesh.boundary_edges[i].label = std::uint16_t(bnd[3 * i + 2]);
  }
  ds.mesh.finalize();

  for (const auto& s : r.header.at("sources"))
    ds.source_defs.push_back(
        {s.at("segment").get<std::string>(), s.at("power").get<double>()});

  DatasetConfig& cfg = ds.config;
  cfg.samples = r.header.at("samples").get<std::size_t>();
  cfg.noise_level = r.header.at("noise_level").get<double>();
  cfg.seed = r.header.at("seed").get<std::uint64_t>();
  cfg.backend = detail::backend_from_name(r.header.at("backend"));
  const auto& mc = r.header.at("mc");
  cfg.mc.photons = mc.at("photons").get<std::uint64_t>();
  cfg.mc.weight_threshold = mc.at("weight_threshold").get<double>();
  cfg.mc.survival = mc.at("survival").get<double>();
  cfg.mc.launch = mc.at("launch") == "cosine" ? LaunchProfile::Cosine
                                              : LaunchProfile::Collimated;
  cfg.mc.batch_size = mc.at("batch_size").get<std::uint64_t>();
  cfg.init = detail::init_from_name(r.header.at("init"));
  cfg.init_perturbation = r.header.at("init_perturbation").get<double>();
  cfg.train_fraction = r.header.at("train_fraction").get<double>();
  cfg.val_fraction = r.header.at("val_fraction").get<double>();
  ds.mean_bg_mua = r.header.at("mean_bg")[0].get<double>();
  ds.mean_bg_mus = r.header.at("mean_bg")[1].get<double>();

  const std::size_t n = cfg.samples;
  const Eigen::Index nd = Eigen::Index(ds.mesh.node_count());
  const Eigen::Index ni = r.header.at("illuminations").get<Eigen::Index>();
  const auto& truth = r.f64("truth");
  const auto& h_clean = r.f64("data_clean");
  const auto& h_noisy = r.f64("data_noisy");
  const auto& sigma = r.f64("noise_std");
  const auto& init = r.f64("init");
  const auto& bg = r.f64("background");
  const auto& seeds = r.u32("sample_seeds");
  ds.samples.resize(n);
  const std::size_t dw = std::size_t(nd) * std::size_t(ni);
  for (std::size_t i = 0; i < n; ++i) {
    Sample& s = ds.samples[i];
    s.truth = Eigen::Map<const VectorXd>(truth.data() + i * 2 * nd, 2 * nd);
    s.h_clean = Eigen::Map<const MatrixXd>(h_clean.data() + i * dw, nd, ni);
    s.h_noisy = Eigen::Map<const MatrixXd>(h_noisy.data() + i * dw, nd, ni);
    s.sigma = Eigen::Map<const MatrixXd>(sigma.data() + i * dw, nd, ni);
    s.x0 = Eigen::Map<const VectorXd>(init.data() + i * 2 * nd, 2 * nd);
    s.bg_mua = bg[2 * i];
    s.bg_mus = bg[2 * i + 1];
    s.seed = (std::uint64_t(seeds[2 * i]) << 32) | seeds[2 * i + 1];
  }
  ds.train = r.u32("split_train");
  ds.val = r.u32("split_val");
  ds.test = r.u32("split_test");
  return ds;
}

}  // namespace qpat
