#pragma once

// Learned iterative reconstruction. Each of the K iterates computes a
// model-based step direction on the mesh (GD, GN with an l2 prior, or SR1)
// and feeds [iterate, direction] images through one CNN update block per
// parameter on a fixed pixel grid:
//   x_img -> extract -> x_mesh -> direction -> embed -> p_img
//   x_next = max(x_img + block([x_img/cx, p_img/cp]), 0) + 1e-5
// Training is greedy (per-stage, directions frozen per stage) or end-to-end
// for the GD direction, where the backward pass composes the block gradients,
// the grid transfer adjoints, and an FD Hessian-vector product of the
// objective for the derivative of the direction itself.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "qpat/dataset.hpp"
#include "qpat/neural.hpp"
#include "qpat/parallel.hpp"
#include "qpat/solvers.hpp"
#include "qpat/variational.hpp"

namespace qpat {

inline std::string engine_name(StepEngine e) {
  switch (e) {
    case StepEngine::GD: return "gd";
    case StepEngine::GN: return "gn";
    default: return "sr1";
  }
}

inline StepEngine engine_from_name(const std::string& s) {
  if (s == "gd") return StepEngine::GD;
  if (s == "gn") return StepEngine::GN;
  if (s == "sr1") return StepEngine::SR1;
  throw std::runtime_error("unknown step engine '" + s + "'");
}

struct OperatorConfig {
  int K = 5;
  StepEngine engine = StepEngine::GN;
  std::uint32_t grid_rows = 48, grid_cols = 48;
  TransformConfig transforms;   // spaces for the direction computation
  GnPreset gn = kGnPresetA;     // l2 prior weights of the GN direction
  double sr1_omega = 1e-8;

  void validate() const {
    if (K < 1) throw std::invalid_argument("operator: need K >= 1");
    if (grid_rows < 2 || grid_cols < 2)
      throw std::invalid_argument("operator: grid too small");
    if (!(sr1_omega > 0.0))
      throw std::invalid_argument("operator: need sr1_omega > 0");
  }
};

// K pairs of update blocks plus the input normalization recorded at training
// time; float is the training precision, double instantiations exist for
// derivative checks
template <typename T = float>
struct ReconstructionOperator {
  OperatorConfig cfg;
  std::vector<UpdateBlock<T>> blocks_mua, blocks_mus;
  double x_scale_mua = 1.0, x_scale_mus = 1.0;
  std::vector<std::array<double, 2>> p_scales;  // per iterate {mu_a, mu_s'}

  void init(Rng& rng) {
    cfg.validate();
    blocks_mua.assign(std::size_t(cfg.K), UpdateBlock<T>());
    blocks_mus.assign(std::size_t(cfg.K), UpdateBlock<T>());
    p_scales.assign(std::size_t(cfg.K), {1.0, 1.0});
    for (int k = 0; k < cfg.K; ++k) {
      blocks_mua[std::size_t(k)].init(rng);
      blocks_mus[std::size_t(k)].init(rng);
    }
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* v : {&blocks_mua, &blocks_mus})
      for (auto& b : *v) n += b.param_count();
    return n;
  }
};

// diagonal inverse-variance weighting from a sample's noise map; identity
// when the dataset was built without measurement noise
inline NoiseWeighting sample_weighting(const Sample& s) {
  if (s.sigma.size() == 0 || s.sigma.maxCoeff() <= 0.0)
    return NoiseWeighting::identity();
  return NoiseWeighting::from_noise_std(s.sigma);
}

// quasi-Newton rollout state; the inverse-Hessian approximation is sized on
// first use and advanced with the network's realized update as the secant s
struct Sr1State {
  MatrixXd h;
  VectorXd prev_u, prev_g;
  int skipped = 0;
};

// One sample's step-direction oracle. Construction is cheap (no
// factorization); every direction() pays one PDE solve at the given iterate.
class StepDirectionEngine {
 public:
  StepDirectionEngine(const TriMesh& mesh,
                      const std::vector<SourceSpec>& sources,
                      const MatrixXd& data, NoiseWeighting weighting,
                      const OperatorConfig& cfg, VectorXd prior_mean)
      : kind_(cfg.engine),
        omega_(cfg.sr1_omega),
        problem_(mesh, sources, ParamBasis::Nodal, data, std::move(weighting),
                 cfg.transforms,
                 cfg.engine == StepEngine::GN
                     ? PriorVariant(make_uncorrelated_prior(
                           prior_mean.size() / 2, std::move(prior_mean),
                           cfg.gn.alpha_mua, cfg.gn.alpha_mus))
                     : PriorVariant(std::monostate{})) {}

  // solver-space direction at the physical iterate x
  VectorXd direction(const VectorXd& x, Sr1State* state = nullptr) {
    const VectorXd u = problem_.to_solver_space(x);
    if (kind_ == StepEngine::GN) return problem_.gn_direction(u);
    const VectorXd g = problem_.gradient(u);
    if (kind_ == StepEngine::GD) return -g;
    if (state == nullptr)
      throw InvalidState("sr1 direction: missing rollout state");
    if (state->h.size() == 0) {
      state->h = MatrixXd::Identity(g.size(), g.size());
    } else {
      const VectorXd s = u - state->prev_u;
      const VectorXd y = g - state->prev_g;
      if (!sr1_update(state->h, s, y, omega_)) ++state->skipped;
    }
    state->prev_u = u;
    state->prev_g = g;
    return -(state->h * g);
  }

  // (dp/dx)^T v for the GD direction p(x) = -grad E(u(x)): an FD
  // Hessian-vector product in solver space, chained through u = log x when
  // the parameter transform is on
  VectorXd pullback(const VectorXd& x, const VectorXd& v) {
    if (kind_ != StepEngine::GD)
      throw InvalidState("direction pullback: only the GD direction is "
                         "differentiated");
    const bool log_param = problem_.transforms().log_param;
    const VectorXd u = problem_.to_solver_space(x);
    const VectorXd hv = hvp_central(
        [this](const VectorXd& uu) { return problem_.gradient(uu); }, u, v,
        /*require_positive=*/!log_param);
    if (!log_param) return -hv;
    return VectorXd(-(hv.array() / x.array()));
  }

  InversionProblem& problem() { return problem_; }

 private:
  StepEngine kind_;
  double omega_;
  InversionProblem problem_;
};

namespace learned_detail {

template <typename T>
Tensor<T> to_tensor(const VectorXd& img, std::uint32_t rows,
                    std::uint32_t cols) {
  if (std::size_t(img.size()) != std::size_t(rows) * cols)
    throw std::invalid_argument("image size does not match the grid");
  Tensor<T> t(1, 1, int(rows), int(cols));
  for (std::size_t k = 0; k < t.v.size(); ++k) t.v[k] = T(img[Eigen::Index(k)]);
  return t;
}

template <typename T>
VectorXd to_image(const Tensor<T>& t) {
  VectorXd img(Eigen::Index(t.size()));
  for (std::size_t k = 0; k < t.v.size(); ++k)
    img[Eigen::Index(k)] = double(t.v[k]);
  return img;
}

// the pixel-grid iterate, one single-image tensor per parameter
template <typename T>
struct GridIterate {
  Tensor<T> xa, xs;
};

template <typename T>
GridIterate<T> initial_iterate(const GridMapper& mapper, const VectorXd& x0) {
  const Eigen::Index nd = x0.size() / 2;
  const auto& g = mapper.grid();
  GridIterate<T> it;
  it.xa = to_tensor<T>(mapper.embed(x0.head(nd)), g.rows, g.cols);
  it.xs = to_tensor<T>(mapper.embed(x0.tail(nd)), g.rows, g.cols);
  return it;
}

template <typename T>
VectorXd iterate_to_mesh(const GridMapper& mapper, const GridIterate<T>& it) {
  return stack_params(mapper.extract(to_image(it.xa)),
                      mapper.extract(to_image(it.xs)));
}

// fixed-order access to the 14 weight arrays of a block
template <typename T>
std::vector<std::vector<T>*> param_arrays(UpdateBlock<T>& b) {
  std::vector<std::vector<T>*> out;
  b.for_each_array(
      [&](const char*, std::vector<T>& p, std::vector<T>&) { out.push_back(&p); });
  return out;
}

template <typename T>
std::vector<std::vector<T>*> grad_arrays(UpdateBlock<T>& b) {
  std::vector<std::vector<T>*> out;
  b.for_each_array(
      [&](const char*, std::vector<T>&, std::vector<T>& g) { out.push_back(&g); });
  return out;
}

template <typename T>
void copy_weights(UpdateBlock<T>& dst, UpdateBlock<T>& src) {
  auto d = param_arrays(dst), s = param_arrays(src);
  for (std::size_t a = 0; a < d.size(); ++a) *d[a] = *s[a];
}

template <typename T>
void accumulate_grads(UpdateBlock<T>& dst, UpdateBlock<T>& src) {
  auto d = grad_arrays(dst), s = grad_arrays(src);
  for (std::size_t a = 0; a < d.size(); ++a) {
    auto& dv = *d[a];
    const auto& sv = *s[a];
    for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += sv[i];
  }
}

template <typename T>
bool grads_finite(UpdateBlock<T>& b) {
  bool ok = true;
  b.for_each_array([&](const char*, std::vector<T>&, std::vector<T>& g) {
    for (const T& v : g)
      if (!std::isfinite(double(v))) ok = false;
  });
  return ok;
}

// snapshot of every weight array across the operator, for NaN recovery
template <typename T>
std::vector<std::vector<T>> weight_snapshot(ReconstructionOperator<T>& op) {
  std::vector<std::vector<T>> snap;
  for (auto* v : {&op.blocks_mua, &op.blocks_mus})
    for (auto& b : *v)
      for (auto* p : param_arrays(b)) snap.push_back(*p);
  return snap;
}

template <typename T>
void restore_snapshot(ReconstructionOperator<T>& op,
                      const std::vector<std::vector<T>>& snap) {
  std::size_t j = 0;
  for (auto* v : {&op.blocks_mua, &op.blocks_mus})
    for (auto& b : *v)
      for (auto* p : param_arrays(b)) *p = snap[j++];
}

// squared-error loss over an image and its output cotangent
template <typename T>
double image_mse(const Tensor<T>& out, const Tensor<T>& truth,
                 double weight, Tensor<T>* cot) {
  const double npx = double(out.size());
  double loss = 0;
  if (cot) *cot = Tensor<T>(out.n, out.c, out.h, out.w);
  for (std::size_t k = 0; k < out.v.size(); ++k) {
    const double d = double(out.v[k]) - double(truth.v[k]);
    loss += d * d;
    if (cot) cot->v[k] = T(weight * 2.0 * d / npx);
  }
  return weight * loss / npx;
}

template <typename T>
void apply_mask(Tensor<T>& t, const std::vector<std::uint8_t>& mask) {
  for (std::size_t k = 0; k < t.v.size(); ++k)
    if (!mask[k]) t.v[k] = T(0);
}

template <typename T>
Tensor<T> channel(const Tensor<T>& t, int j) {
  Tensor<T> out(t.n, 1, t.h, t.w);
  for (int i = 0; i < t.n; ++i) {
    const T* src = t.plane(i, j);
    std::copy(src, src + std::size_t(t.h) * t.w, out.plane(i, 0));
  }
  return out;
}

}  // namespace learned_detail

struct ReconResult {
  VectorXd x;                      // final stacked nodal fields, physical
  std::vector<VectorXd> iterates;  // x^(0) ... x^(K) on the mesh
  std::vector<double> rel_err_mua, rel_err_mus;  // per iterate, given truth
  int sr1_skipped = 0;
};

template <typename T>
ReconResult reconstruct(ReconstructionOperator<T>& op, const TriMesh& mesh,
                        const std::vector<SourceSpec>& sources,
                        const GridMapper& mapper, const MatrixXd& h,
                        const NoiseWeighting& weighting, const VectorXd& x0,
                        const VectorXd* truth = nullptr) {
  namespace ld = learned_detail;
  op.cfg.validate();
  if (int(op.blocks_mua.size()) != op.cfg.K ||
      int(op.blocks_mus.size()) != op.cfg.K ||
      int(op.p_scales.size()) != op.cfg.K)
    throw InvalidState("reconstruct: operator blocks not initialized");
  if (x0.minCoeff() <= 0.0)
    throw std::domain_error("reconstruct: initial values must be positive");

  StepDirectionEngine engine(mesh, sources, h, weighting, op.cfg, x0);
  Sr1State sr1;
  const auto& grid = mapper.grid();
  const Eigen::Index nd = x0.size() / 2;

  ReconResult res;
  auto record = [&](const VectorXd& x_mesh) {
    res.iterates.push_back(x_mesh);
    if (truth) {
      res.rel_err_mua.push_back(
          relative_error(x_mesh.head(nd), truth->head(nd)));
      res.rel_err_mus.push_back(
          relative_error(x_mesh.tail(nd), truth->tail(nd)));
    }
  };

  ld::GridIterate<T> it = ld::initial_iterate<T>(mapper, x0);
  VectorXd x_mesh = ld::iterate_to_mesh(mapper, it);
  record(x_mesh);
  for (int k = 0; k < op.cfg.K; ++k) {
    const VectorXd p = engine.direction(x_mesh, &sr1);
    const Tensor<T> pa =
        ld::to_tensor<T>(mapper.embed(p.head(nd)), grid.rows, grid.cols);
    const Tensor<T> ps =
        ld::to_tensor<T>(mapper.embed(p.tail(nd)), grid.rows, grid.cols);
    it.xa = update_block_apply(it.xa, pa, op.blocks_mua[std::size_t(k)],
                               T(op.x_scale_mua), T(op.p_scales[std::size_t(k)][0]));
    it.xs = update_block_apply(it.xs, ps, op.blocks_mus[std::size_t(k)],
                               T(op.x_scale_mus), T(op.p_scales[std::size_t(k)][1]));
    x_mesh = ld::iterate_to_mesh(mapper, it);
    record(x_mesh);
  }
  res.x = x_mesh;
  res.sr1_skipped = sr1.skipped;
  return res;
}

struct TrainConfig {
  long steps = 2000;   // Adam steps per stage (greedy) or in total (e2e)
  int batch = 4;
  double lr = 1e-4;
  double scatter_weight = 0.01;  // weight of the mu_s' term in the loss
  long warmup_steps = 0;         // e2e: smaller initial learning steps
  double warmup_factor = 0.1;
  int max_backoffs = 5;          // e2e: lr halvings before giving up
  std::uint64_t seed = 0;
  int val_cap = 0;               // validation subset size, 0 = all
  long log_every = 50;
  bool stop_gradient = false;    // e2e: treat directions as constants

  void validate() const {
    if (steps < 1 || batch < 1)
      throw std::invalid_argument("training: need steps >= 1, batch >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("training: need lr > 0");
    if (scatter_weight < 0.0 || warmup_steps < 0 ||
        !(warmup_factor > 0.0 && warmup_factor <= 1.0))
      throw std::invalid_argument("training: bad loss or warmup settings");
  }
};

struct TrainLogRow {
  long step = 0;  // global step index across stages
  int stage = 0;
  double loss = 0, lr = 0;
  double val_rel_err_mua = std::numeric_limits<double>::quiet_NaN();
  double val_rel_err_mus = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  // mean validation error after each trained iterate (greedy) or at the end
  std::vector<std::array<double, 2>> val_errors;
  bool aborted = false;
  std::string abort_reason;
  int sr1_skipped = 0;

  void log_to_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("training log: cannot write " + path);
    out << "step,loss,lr,val_rel_err_mua,val_rel_err_mus\n";
    out.precision(12);
    for (const auto& r : log)
      out << r.step << ',' << r.loss << ',' << r.lr << ',' << r.val_rel_err_mua
          << ',' << r.val_rel_err_mus << '\n';
  }
};

namespace learned_detail {

// per-sample training context: ground truth in both spaces, data, and the
// persistent pieces of the rollout (grid iterate, SR1 state)
template <typename T>
struct SampleState {
  const Sample* sample = nullptr;
  Tensor<T> truth_a, truth_s;
  GridIterate<T> it;
  Sr1State sr1;
  VectorXd pa_img, ps_img;  // last computed direction images
};

template <typename T>
std::vector<SampleState<T>> make_states(const Dataset& ds,
                                        const GridMapper& mapper,
                                        const std::vector<std::uint32_t>& ids,
                                        bool need_truth_images) {
  const auto& g = mapper.grid();
  std::vector<SampleState<T>> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Sample& s = ds.samples[ids[i]];
    const Eigen::Index nd = s.truth.size() / 2;
    out[i].sample = &s;
    if (need_truth_images) {
      out[i].truth_a =
          to_tensor<T>(mapper.embed(s.truth.head(nd)), g.rows, g.cols);
      out[i].truth_s =
          to_tensor<T>(mapper.embed(s.truth.tail(nd)), g.rows, g.cols);
    }
    out[i].it = initial_iterate<T>(mapper, s.x0);
  }
  return out;
}

// mean over samples of the mesh-space relative errors at the current iterates
template <typename T>
std::array<double, 2> cohort_errors(const GridMapper& mapper,
                                    const std::vector<SampleState<T>>& states) {
  std::array<double, 2> err{0, 0};
  if (states.empty())
    return {std::numeric_limits<double>::quiet_NaN(),
            std::numeric_limits<double>::quiet_NaN()};
  for (const auto& st : states) {
    const VectorXd x = iterate_to_mesh(mapper, st.it);
    const Eigen::Index nd = x.size() / 2;
    err[0] += relative_error(x.head(nd), st.sample->truth.head(nd));
    err[1] += relative_error(x.tail(nd), st.sample->truth.tail(nd));
  }
  err[0] /= double(states.size());
  err[1] /= double(states.size());
  return err;
}

template <typename T>
void set_input_scales(ReconstructionOperator<T>& op,
                      const std::vector<SampleState<T>>& train) {
  double ma = 0, ms = 0;
  for (const auto& st : train) {
    const Eigen::Index nd = st.sample->x0.size() / 2;
    ma += st.sample->x0.head(nd).mean();
    ms += st.sample->x0.tail(nd).mean();
  }
  op.x_scale_mua = ma / double(train.size());
  op.x_scale_mus = ms / double(train.size());
}

// one direction evaluation per sample, in parallel; directions are stored as
// images on each state. Exceptions are captured and rethrown serially.
template <typename T>
void compute_directions(const Dataset& ds, const GridMapper& mapper,
                        const OperatorConfig& cfg,
                        const std::vector<SourceSpec>& sources,
                        std::vector<SampleState<T>>& states) {
  const auto& g = mapper.grid();
  std::vector<std::string> errors(states.size());
  parallel_for(states.size(), [&](std::size_t i) {
    try {
      SampleState<T>& st = states[i];
      const Eigen::Index nd = st.sample->x0.size() / 2;
      StepDirectionEngine engine(ds.mesh, sources, st.sample->h_noisy,
                                 sample_weighting(*st.sample), cfg,
                                 st.sample->x0);
      const VectorXd x = iterate_to_mesh(mapper, st.it);
      const VectorXd p = engine.direction(x, &st.sr1);
      st.pa_img = mapper.embed(p.head(nd));
      st.ps_img = mapper.embed(p.tail(nd));
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < states.size(); ++i)
    if (!errors[i].empty())
      throw TrainingError("step direction (sample " + std::to_string(i) +
                          "): " + errors[i]);
  (void)g;
}

template <typename T>
std::array<double, 2> direction_scales(
    const std::vector<SampleState<T>>& train) {
  double ma = 0, ms = 0;
  for (const auto& st : train) {
    ma += st.pa_img.cwiseAbs().mean();
    ms += st.ps_img.cwiseAbs().mean();
  }
  ma /= double(train.size());
  ms /= double(train.size());
  return {ma > 0.0 ? ma : 1.0, ms > 0.0 ? ms : 1.0};
}

// Adam machinery over the 14 arrays of each block in a stage pair
template <typename T>
struct PairOptimizer {
  std::vector<AdamState<T>> st_a, st_s;

  PairOptimizer(UpdateBlock<T>& a, UpdateBlock<T>& s) {
    auto sizes = [](UpdateBlock<T>& b, std::vector<AdamState<T>>& st) {
      b.for_each_array([&](const char*, std::vector<T>& p, std::vector<T>&) {
        st.emplace_back();
        st.back().resize(p.size());
      });
    };
    sizes(a, st_a);
    sizes(s, st_s);
  }

  void step(UpdateBlock<T>& a, UpdateBlock<T>& s, double lr, long t) {
    std::size_t j = 0;
    a.for_each_array([&](const char*, std::vector<T>& p, std::vector<T>& g) {
      adam_step(p, g, st_a[j++], lr, t);
    });
    j = 0;
    s.for_each_array([&](const char*, std::vector<T>& p, std::vector<T>& g) {
      adam_step(p, g, st_s[j++], lr, t);
    });
  }
};

}  // namespace learned_detail

// Greedy training: for each iterate, step directions are computed once per
// sample with the earlier blocks frozen, the block pair is trained against
// the ground truth images, and the cohort is rolled forward.
template <typename T = float>
ReconstructionOperator<T> greedy_train(const Dataset& ds,
                                       const OperatorConfig& ocfg,
                                       const TrainConfig& tcfg,
                                       TrainResult* result = nullptr) {
  namespace ld = learned_detail;
  ocfg.validate();
  tcfg.validate();
  if (ds.train.empty()) throw std::invalid_argument("training: empty split");

  ReconstructionOperator<T> op;
  op.cfg = ocfg;
  Rng init_rng(tcfg.seed);
  op.init(init_rng);

  const PixelGrid grid = PixelGrid::covering(ds.mesh, ocfg.grid_rows,
                                             ocfg.grid_cols);
  const GridMapper mapper(ds.mesh, grid);
  const auto sources = ds.sources();

  std::vector<std::uint32_t> val_ids = ds.val;
  if (tcfg.val_cap > 0 && int(val_ids.size()) > tcfg.val_cap)
    val_ids.resize(std::size_t(tcfg.val_cap));
  auto train_states = ld::make_states<T>(ds, mapper, ds.train, true);
  auto val_states = ld::make_states<T>(ds, mapper, val_ids, false);
  ld::set_input_scales(op, train_states);

  TrainResult local;
  TrainResult& res = result ? *result : local;
  const std::size_t npick = train_states.size();

  for (int k = 0; k < ocfg.K && !res.aborted; ++k) {
    ld::compute_directions(ds, mapper, ocfg, sources, train_states);
    ld::compute_directions(ds, mapper, ocfg, sources, val_states);
    op.p_scales[std::size_t(k)] = ld::direction_scales(train_states);
    const T psc_a = T(op.p_scales[std::size_t(k)][0]);
    const T psc_s = T(op.p_scales[std::size_t(k)][1]);

    UpdateBlock<T>& block_a = op.blocks_mua[std::size_t(k)];
    UpdateBlock<T>& block_s = op.blocks_mus[std::size_t(k)];
    ld::PairOptimizer<T> opt(block_a, block_s);
    Rng pick_rng = Rng(tcfg.seed).child(101 + std::uint64_t(k));

    std::vector<std::vector<T>> snapshot;
    for (long t = 1; t <= tcfg.steps && !res.aborted; ++t) {
      const double lr = cosine_lr(t - 1, tcfg.steps, tcfg.lr);
      std::vector<std::size_t> picks(std::size_t(tcfg.batch));
      for (auto& p : picks) p = pick_rng.uniform_index(npick);

      struct Slot {
        UpdateBlock<T> ba, bs;
        double loss = 0;
        std::string error;
      };
      std::vector<Slot> slots(picks.size());
      parallel_for(picks.size(), [&](std::size_t i) {
        Slot& slot = slots[i];
        try {
          ld::SampleState<T>& st = train_states[picks[i]];
          slot.ba = block_a;
          slot.bs = block_s;
          slot.ba.zero_grad();
          slot.bs.zero_grad();
          const Tensor<T> pa = ld::to_tensor<T>(st.pa_img, grid.rows, grid.cols);
          const Tensor<T> ps = ld::to_tensor<T>(st.ps_img, grid.rows, grid.cols);
          auto one = [&](UpdateBlock<T>& b, const Tensor<T>& x,
                         const Tensor<T>& p, const Tensor<T>& truth, T xsc,
                         T psc, double weight) {
            const Tensor<T> delta =
                b.delta_forward(make_block_input(x, p, xsc, psc));
            std::vector<std::uint8_t> mask;
            const Tensor<T> out = residual_clamp(x, delta, &mask);
            Tensor<T> cot;
            slot.loss += ld::image_mse(out, truth, weight, &cot) /
                         double(picks.size());
            for (auto& v : cot.v) v = T(double(v) / double(picks.size()));
            ld::apply_mask(cot, mask);
            b.delta_backward(cot);
          };
          one(slot.ba, st.it.xa, pa, st.truth_a, T(op.x_scale_mua), psc_a, 1.0);
          one(slot.bs, st.it.xs, ps, st.truth_s, T(op.x_scale_mus), psc_s,
              tcfg.scatter_weight);
        } catch (const std::exception& e) {
          slot.error = e.what();
        }
      });

      block_a.zero_grad();
      block_s.zero_grad();
      double loss = 0;
      bool bad = false;
      std::string bad_reason;
      for (auto& slot : slots) {
        if (!slot.error.empty()) {
          bad = true;
          bad_reason = slot.error;
          break;
        }
        loss += slot.loss;
        ld::accumulate_grads(block_a, slot.ba);
        ld::accumulate_grads(block_s, slot.bs);
      }
      if (!bad && (!std::isfinite(loss) || !ld::grads_finite(block_a) ||
                   !ld::grads_finite(block_s))) {
        bad = true;
        bad_reason = "non-finite loss or gradient";
      }
      if (bad) {
        if (!snapshot.empty()) ld::restore_snapshot(op, snapshot);
        res.aborted = true;
        res.abort_reason = "stage " + std::to_string(k) + " step " +
                           std::to_string(t) + ": " + bad_reason;
        break;
      }
      snapshot = ld::weight_snapshot(op);
      opt.step(block_a, block_s, lr, t);
      if (t % tcfg.log_every == 0 || t == tcfg.steps)
        res.log.push_back({long(k) * tcfg.steps + t, k, loss, lr,
                           std::numeric_limits<double>::quiet_NaN(),
                           std::numeric_limits<double>::quiet_NaN()});
    }
    if (res.aborted) break;

    // roll both cohorts through the trained pair
    auto roll = [&](std::vector<ld::SampleState<T>>& states) {
      for (auto& st : states) {
        const Tensor<T> pa = ld::to_tensor<T>(st.pa_img, grid.rows, grid.cols);
        const Tensor<T> ps = ld::to_tensor<T>(st.ps_img, grid.rows, grid.cols);
        st.it.xa = update_block_apply(st.it.xa, pa, block_a,
                                      T(op.x_scale_mua), psc_a);
        st.it.xs = update_block_apply(st.it.xs, ps, block_s,
                                      T(op.x_scale_mus), psc_s);
      }
    };
    roll(train_states);
    roll(val_states);
    const auto err = ld::cohort_errors(mapper, val_states);
    res.val_errors.push_back(err);
    if (!res.log.empty() && !val_states.empty()) {
      res.log.back().val_rel_err_mua = err[0];
      res.log.back().val_rel_err_mus = err[1];
    }
  }
  for (const auto& st : train_states) res.sr1_skipped += st.sr1.skipped;
  return op;
}

namespace learned_detail {

// One end-to-end rollout with optional backward pass. The forward pass keeps
// the per-stage images, directions and clamp masks; the backward pass chains
// block gradients, grid-transfer adjoints, and the direction pullback.
// Gradients accumulate into the given blocks.
template <typename T>
double e2e_rollout(const Dataset& ds, const GridMapper& mapper,
                   ReconstructionOperator<T>& op, SampleState<T>& st,
                   const std::vector<SourceSpec>& sources,
                   double scatter_weight, double inv_batch, bool backward,
                   bool stop_gradient) {
  const auto& grid = mapper.grid();
  const OperatorConfig& cfg = op.cfg;
  const Eigen::Index nd = st.sample->x0.size() / 2;
  StepDirectionEngine engine(ds.mesh, sources, st.sample->h_noisy,
                             sample_weighting(*st.sample), cfg,
                             st.sample->x0);

  struct Stage {
    GridIterate<T> in;
    VectorXd x_mesh;
    std::vector<std::uint8_t> mask_a, mask_s;
  };
  std::vector<Stage> stages(std::size_t(cfg.K));

  GridIterate<T> it = initial_iterate<T>(mapper, st.sample->x0);
  for (int k = 0; k < cfg.K; ++k) {
    Stage& sg = stages[std::size_t(k)];
    sg.in = it;
    sg.x_mesh = iterate_to_mesh(mapper, it);
    const VectorXd p = engine.direction(sg.x_mesh, &st.sr1);
    const Tensor<T> pa = to_tensor<T>(mapper.embed(p.head(nd)), grid.rows,
                                      grid.cols);
    const Tensor<T> ps = to_tensor<T>(mapper.embed(p.tail(nd)), grid.rows,
                                      grid.cols);
    const T psc_a = T(op.p_scales[std::size_t(k)][0]);
    const T psc_s = T(op.p_scales[std::size_t(k)][1]);
    UpdateBlock<T>& ba = op.blocks_mua[std::size_t(k)];
    UpdateBlock<T>& bs = op.blocks_mus[std::size_t(k)];
    const Tensor<T> da =
        ba.delta_forward(make_block_input(it.xa, pa, T(op.x_scale_mua), psc_a));
    const Tensor<T> dscat =
        bs.delta_forward(make_block_input(it.xs, ps, T(op.x_scale_mus), psc_s));
    it.xa = residual_clamp(sg.in.xa, da, &sg.mask_a);
    it.xs = residual_clamp(sg.in.xs, dscat, &sg.mask_s);
  }

  Tensor<T> ga, gs;
  double loss =
      image_mse(it.xa, st.truth_a, 1.0, backward ? &ga : nullptr) * inv_batch;
  loss += image_mse(it.xs, st.truth_s, scatter_weight,
                    backward ? &gs : nullptr) *
          inv_batch;
  if (!backward) {
    st.it = it;
    return loss;
  }
  for (auto& v : ga.v) v = T(double(v) * inv_batch);
  for (auto& v : gs.v) v = T(double(v) * inv_batch);

  for (int k = cfg.K - 1; k >= 0; --k) {
    Stage& sg = stages[std::size_t(k)];
    const T psc_a = T(op.p_scales[std::size_t(k)][0]);
    const T psc_s = T(op.p_scales[std::size_t(k)][1]);
    Tensor<T> gda = ga, gds = gs;
    apply_mask(gda, sg.mask_a);
    apply_mask(gds, sg.mask_s);
    // the masked cotangent also hits the iterate through the skip path
    Tensor<T> gxa = gda, gxs = gds;
    const Tensor<T> gin_a =
        op.blocks_mua[std::size_t(k)].delta_backward(gda);
    const Tensor<T> gin_s =
        op.blocks_mus[std::size_t(k)].delta_backward(gds);
    {
      const Tensor<T> c0 = channel(gin_a, 0);
      for (std::size_t k2 = 0; k2 < gxa.v.size(); ++k2)
        gxa.v[k2] += T(double(c0.v[k2]) / op.x_scale_mua);
    }
    {
      const Tensor<T> c0 = channel(gin_s, 0);
      for (std::size_t k2 = 0; k2 < gxs.v.size(); ++k2)
        gxs.v[k2] += T(double(c0.v[k2]) / op.x_scale_mus);
    }
    if (!stop_gradient) {
      VectorXd gpa = to_image(channel(gin_a, 1)) / double(psc_a);
      VectorXd gps = to_image(channel(gin_s, 1)) / double(psc_s);
      const VectorXd gp_mesh = stack_params(mapper.embed_adjoint(gpa),
                                            mapper.embed_adjoint(gps));
      if (gp_mesh.cwiseAbs().maxCoeff() > 0.0) {
        const VectorXd gx_mesh = engine.pullback(sg.x_mesh, gp_mesh);
        const VectorXd gia = mapper.extract_adjoint(gx_mesh.head(nd));
        const VectorXd gis = mapper.extract_adjoint(gx_mesh.tail(nd));
        for (std::size_t k2 = 0; k2 < gxa.v.size(); ++k2) {
          gxa.v[k2] += T(gia[Eigen::Index(k2)]);
          gxs.v[k2] += T(gis[Eigen::Index(k2)]);
        }
      }
    }
    ga = std::move(gxa);
    gs = std::move(gxs);
  }
  st.it = it;
  return loss;
}

}  // namespace learned_detail

// Loss (and, optionally, accumulated weight gradients) of one end-to-end
// batch at the operator's current weights. Exposed for derivative checks.
template <typename T>
double e2e_batch(const Dataset& ds, const GridMapper& mapper,
                 ReconstructionOperator<T>& op,
                 const std::vector<std::uint32_t>& ids, double scatter_weight,
                 bool backward, bool stop_gradient = false) {
  namespace ld = learned_detail;
  auto states = ld::make_states<T>(ds, mapper, ids, true);
  const auto sources = ds.sources();
  double loss = 0;
  for (auto& st : states)
    loss += ld::e2e_rollout(ds, mapper, op, st, sources, scatter_weight,
                            1.0 / double(ids.size()), backward, stop_gradient);
  return loss;
}

// End-to-end training of the unrolled operator with the GD direction (other
// directions only with stop_gradient, as a labeled ablation). Input scales
// are frozen from a rollout of the freshly initialized operator.
template <typename T = float>
ReconstructionOperator<T> e2e_train_gd(const Dataset& ds,
                                       const OperatorConfig& ocfg,
                                       const TrainConfig& tcfg,
                                       TrainResult* result = nullptr) {
  namespace ld = learned_detail;
  ocfg.validate();
  tcfg.validate();
  if (ds.train.empty()) throw std::invalid_argument("training: empty split");
  if (ocfg.engine != StepEngine::GD && !tcfg.stop_gradient)
    throw std::invalid_argument(
        "e2e training differentiates only the GD direction; other engines "
        "need stop_gradient");
  if (ocfg.engine == StepEngine::SR1)
    throw std::invalid_argument("e2e training does not support SR1 state");

  ReconstructionOperator<T> op;
  op.cfg = ocfg;
  Rng init_rng(tcfg.seed);
  op.init(init_rng);

  const PixelGrid grid = PixelGrid::covering(ds.mesh, ocfg.grid_rows,
                                             ocfg.grid_cols);
  const GridMapper mapper(ds.mesh, grid);
  const auto sources = ds.sources();

  TrainResult local;
  TrainResult& res = result ? *result : local;

  // scale calibration: one stage-wise rollout of the initial operator over a
  // bounded subset of the training split
  {
    std::vector<std::uint32_t> calib(
        ds.train.begin(),
        ds.train.begin() + std::min<std::size_t>(ds.train.size(), 32));
    auto states = ld::make_states<T>(ds, mapper, calib, false);
    auto snapshot = ld::weight_snapshot(op);
    for (int k = 0; k < ocfg.K; ++k) {
      ld::compute_directions(ds, mapper, ocfg, sources, states);
      op.p_scales[std::size_t(k)] = ld::direction_scales(states);
      for (auto& st : states) {
        const Tensor<T> pa = ld::to_tensor<T>(st.pa_img, grid.rows, grid.cols);
        const Tensor<T> ps = ld::to_tensor<T>(st.ps_img, grid.rows, grid.cols);
        st.it.xa = update_block_apply(st.it.xa, pa,
                                      op.blocks_mua[std::size_t(k)],
                                      T(op.x_scale_mua),
                                      T(op.p_scales[std::size_t(k)][0]));
        st.it.xs = update_block_apply(st.it.xs, ps,
                                      op.blocks_mus[std::size_t(k)],
                                      T(op.x_scale_mus),
                                      T(op.p_scales[std::size_t(k)][1]));
      }
      for (auto& st : states) st.sr1 = Sr1State();
    }
    ld::restore_snapshot(op, snapshot);  // rollout leaves weights untouched
  }
  {
    auto probe = ld::make_states<T>(ds, mapper, ds.train, false);
    ld::set_input_scales(op, probe);
  }

  std::vector<ld::PairOptimizer<T>> opts;
  for (int k = 0; k < ocfg.K; ++k)
    opts.emplace_back(op.blocks_mua[std::size_t(k)],
                      op.blocks_mus[std::size_t(k)]);

  Rng pick_rng = Rng(tcfg.seed).child(77);
  const std::size_t npick = ds.train.size();
  double lr_scale = 1.0;
  int backoffs = 0;
  std::vector<std::vector<T>> snapshot;

  for (long t = 1; t <= tcfg.steps; ++t) {
    double ramp = 1.0;
    if (tcfg.warmup_steps > 0 && t <= tcfg.warmup_steps)
      ramp = tcfg.warmup_factor +
             (1.0 - tcfg.warmup_factor) * double(t - 1) /
                 double(tcfg.warmup_steps);
    const double lr = lr_scale * ramp * cosine_lr(t - 1, tcfg.steps, tcfg.lr);

    std::vector<std::uint32_t> ids(std::size_t(tcfg.batch));
    for (auto& id : ids)
      id = ds.train[pick_rng.uniform_index(npick)];

    struct Slot {
      std::vector<UpdateBlock<T>> ba, bs;
      double loss = 0;
      std::string error;
    };
    auto states = ld::make_states<T>(ds, mapper, ids, true);
    std::vector<Slot> slots(ids.size());
    parallel_for(ids.size(), [&](std::size_t i) {
      Slot& slot = slots[i];
      try {
        ReconstructionOperator<T> replica;
        replica.cfg = op.cfg;
        replica.blocks_mua = op.blocks_mua;
        replica.blocks_mus = op.blocks_mus;
        replica.x_scale_mua = op.x_scale_mua;
        replica.x_scale_mus = op.x_scale_mus;
        replica.p_scales = op.p_scales;
        for (auto* v : {&replica.blocks_mua, &replica.blocks_mus})
          for (auto& b : *v) b.zero_grad();
        slot.loss = ld::e2e_rollout(ds, mapper, replica, states[i], sources,
                                    tcfg.scatter_weight,
                                    1.0 / double(ids.size()), true,
                                    tcfg.stop_gradient);
        slot.ba = std::move(replica.blocks_mua);
        slot.bs = std::move(replica.blocks_mus);
      } catch (const std::exception& e) {
        slot.error = e.what();
      }
    });

    for (int k = 0; k < ocfg.K; ++k) {
      op.blocks_mua[std::size_t(k)].zero_grad();
      op.blocks_mus[std::size_t(k)].zero_grad();
    }
    double loss = 0;
    bool bad = false;
    std::string bad_reason;
    for (auto& slot : slots) {
      if (!slot.error.empty()) {
        bad = true;
        bad_reason = slot.error;
        break;
      }
      loss += slot.loss;
      for (int k = 0; k < ocfg.K; ++k) {
        ld::accumulate_grads(op.blocks_mua[std::size_t(k)],
                             slot.ba[std::size_t(k)]);
        ld::accumulate_grads(op.blocks_mus[std::size_t(k)],
                             slot.bs[std::size_t(k)]);
      }
    }
    if (!bad && !std::isfinite(loss)) {
      bad = true;
      bad_reason = "non-finite loss";
    }
    if (!bad) {
      for (int k = 0; k < ocfg.K && !bad; ++k)
        if (!ld::grads_finite(op.blocks_mua[std::size_t(k)]) ||
            !ld::grads_finite(op.blocks_mus[std::size_t(k)])) {
          bad = true;
          bad_reason = "non-finite gradient";
        }
    }
    if (bad) {
      if (!snapshot.empty()) ld::restore_snapshot(op, snapshot);
      if (++backoffs > tcfg.max_backoffs) {
        res.aborted = true;
        res.abort_reason = "step " + std::to_string(t) + ": " + bad_reason +
                           " after " + std::to_string(backoffs - 1) +
                           " lr halvings";
        break;
      }
      lr_scale *= 0.5;
      continue;
    }
    snapshot = ld::weight_snapshot(op);
    for (int k = 0; k < ocfg.K; ++k)
      opts[std::size_t(k)].step(op.blocks_mua[std::size_t(k)],
                                op.blocks_mus[std::size_t(k)], lr, t);
    if (t % tcfg.log_every == 0 || t == tcfg.steps)
      res.log.push_back({t, 0, loss, lr,
                         std::numeric_limits<double>::quiet_NaN(),
                         std::numeric_limits<double>::quiet_NaN()});
  }

  // final validation by full reconstruction
  std::vector<std::uint32_t> val_ids = ds.val;
  if (tcfg.val_cap > 0 && int(val_ids.size()) > tcfg.val_cap)
    val_ids.resize(std::size_t(tcfg.val_cap));
  if (!val_ids.empty()) {
    std::array<double, 2> err{0, 0};
    for (const auto id : val_ids) {
      const Sample& s = ds.samples[id];
      const Eigen::Index nd = s.truth.size() / 2;
      const ReconResult r = reconstruct(op, ds.mesh, sources, mapper,
                                        s.h_noisy, sample_weighting(s), s.x0,
                                        &s.truth);
      err[0] += relative_error(r.x.head(nd), s.truth.head(nd));
      err[1] += relative_error(r.x.tail(nd), s.truth.tail(nd));
    }
    err[0] /= double(val_ids.size());
    err[1] /= double(val_ids.size());
    res.val_errors.push_back(err);
    if (!res.log.empty()) {
      res.log.back().val_rel_err_mua = err[0];
      res.log.back().val_rel_err_mus = err[1];
    }
  }
  return op;
}

// --- checkpoints -------------------------------------------------------------

template <typename T>
void save_operator(ReconstructionOperator<T>& op, const std::string& path,
                   const json& provenance = json::object()) {
  ContainerWriter w;
  w.header["kind"] = "qpat-operator";
  w.header["schema_version"] = 1;
  w.header["K"] = op.cfg.K;
  w.header["engine"] = engine_name(op.cfg.engine);
  w.header["grid"] = {op.cfg.grid_rows, op.cfg.grid_cols};
  w.header["transforms"] = {{"log_param", op.cfg.transforms.log_param},
                            {"log_data", op.cfg.transforms.log_data}};
  w.header["gn"] = {{"alpha_mua", op.cfg.gn.alpha_mua},
                    {"alpha_mus", op.cfg.gn.alpha_mus}};
  w.header["sr1_omega"] = op.cfg.sr1_omega;
  w.header["sr1_secant"] = "network update";  // s_k = x^(k+1) - x^(k)
  w.header["x_scales"] = {op.x_scale_mua, op.x_scale_mus};
  json ps = json::array();
  for (const auto& s : op.p_scales) ps.push_back({s[0], s[1]});
  w.header["p_scales"] = std::move(ps);
  w.header["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
  if (!provenance.empty()) w.header["provenance"] = provenance;

  for (int k = 0; k < op.cfg.K; ++k) {
    auto add = [&](UpdateBlock<T>& b, const std::string& param) {
      b.for_each_array([&](const char* name, std::vector<T>& p,
                           std::vector<T>&) {
        const std::string full =
            "k" + std::to_string(k) + "." + param + "." + name;
        if constexpr (sizeof(T) == 4)
          w.add_f32(full, p, {p.size()});
        else
          w.add_f64(full, std::vector<double>(p.begin(), p.end()), {p.size()});
      });
    };
    add(op.blocks_mua[std::size_t(k)], "mua");
    add(op.blocks_mus[std::size_t(k)], "mus");
  }
  w.write(path);
}

template <typename T = float>
ReconstructionOperator<T> load_operator(const std::string& path) {
  ContainerReader r(path);
  if (r.header.value("kind", "") != "qpat-operator")
    throw std::runtime_error("not an operator checkpoint: " + path);
  const std::string want = sizeof(T) == 4 ? "f32" : "f64";
  if (r.header.value("dtype", "") != want)
    throw std::runtime_error("checkpoint dtype is not " + want + ": " + path);

  ReconstructionOperator<T> op;
  op.cfg.K = r.header.at("K").get<int>();
  op.cfg.engine = engine_from_name(r.header.at("engine"));
  op.cfg.grid_rows = r.header.at("grid")[0].get<std::uint32_t>();
  op.cfg.grid_cols = r.header.at("grid")[1].get<std::uint32_t>();
  op.cfg.transforms.log_param =
      r.header.at("transforms").at("log_param").get<bool>();
  op.cfg.transforms.log_data =
      r.header.at("transforms").at("log_data").get<bool>();
  op.cfg.gn.alpha_mua = r.header.at("gn").at("alpha_mua").get<double>();
  op.cfg.gn.alpha_mus = r.header.at("gn").at("alpha_mus").get<double>();
  op.cfg.sr1_omega = r.header.at("sr1_omega").get<double>();
  op.x_scale_mua = r.header.at("x_scales")[0].get<double>();
  op.x_scale_mus = r.header.at("x_scales")[1].get<double>();
  Rng dummy(0);
  op.init(dummy);
  for (int k = 0; k < op.cfg.K; ++k) {
    op.p_scales[std::size_t(k)] = {
        r.header.at("p_scales")[std::size_t(k)][0].get<double>(),
        r.header.at("p_scales")[std::size_t(k)][1].get<double>()};
    auto read = [&](UpdateBlock<T>& b, const std::string& param) {
      b.for_each_array([&](const char* name, std::vector<T>& p,
                           std::vector<T>&) {
        const std::string full =
            "k" + std::to_string(k) + "." + param + "." + name;
        if constexpr (sizeof(T) == 4) {
          const auto& v = r.f32(full);
          if (v.size() != p.size())
            throw std::runtime_error("checkpoint: size mismatch in " + full);
          std::copy(v.begin(), v.end(), p.begin());
        } else {
          const auto& v = r.f64(full);
          if (v.size() != p.size())
            throw std::runtime_error("checkpoint: size mismatch in " + full);
          std::copy(v.begin(), v.end(), p.begin());
        }
      });
    };
    read(op.blocks_mua[std::size_t(k)], "mua");
    read(op.blocks_mus[std::size_t(k)], "mus");
  }
  return op;
}

}  // namespace qpat
