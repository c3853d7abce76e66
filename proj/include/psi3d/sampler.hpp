#pragma once

// Split-Gibbs outer loop. Each iteration draws a batch cover and, per window:
//   x_B ~ p(x | z, w, y)           exact likelihood draw on the window slices
//   z_B ~ p(z | x_B)  per slice    denoising-posterior prior at rho_d
//   w_B ~ prox + noise on x_B      TV step along z at rho_tv
// then averages windows that share a slice into the persisted (x, z, w).

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "psi3d/binary.hpp"
#include "psi3d/errors.hpp"
#include "psi3d/forward_model.hpp"
#include "psi3d/likelihood.hpp"
#include "psi3d/parallel.hpp"
#include "psi3d/prior.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/scheduler.hpp"
#include "psi3d/tv.hpp"
#include "psi3d/volume.hpp"

namespace psi3d {

/// Exponential schedule start * (end/start)^(t/(steps-1)); holds `end` for t >= steps - 1.
struct AnnealSchedule {
  double start = 1.0;
  double end = 1.0;
  std::size_t steps = 1;

  static AnnealSchedule constant(double v) { return {v, v, 1}; }

  void validate() const {
    require(std::isfinite(start) && start > 0.0 && std::isfinite(end) && end > 0.0,
            "schedule endpoints must be finite and > 0");
    require(steps >= 1, "schedule needs at least one step");
  }

  double value(std::size_t t) const {
    if (t == 0 || steps <= 1) return steps <= 1 && t > 0 ? end : start;
    if (t >= steps - 1) return end;
    return start * std::pow(end / start, static_cast<double>(t) / static_cast<double>(steps - 1));
  }
};

/// Maps a value of `from` to the value of `to` at the same schedule position
/// (log-linear), e.g. rho_d -> latent starting noise.
inline std::function<double(double)> schedule_map(AnnealSchedule from, AnnealSchedule to) {
  return [from, to](double v) {
    if (from.start == from.end) return to.end;
    double frac = std::log(v / from.start) / std::log(from.end / from.start);
    frac = std::clamp(frac, 0.0, 1.0);
    return to.start * std::pow(to.end / to.start, frac);
  };
}

enum class CoverRefresh { every_iteration, once };
enum class CoverMethod { randomized, sliding_window };

struct ChainConfig {
  std::size_t iterations = 140;
  std::size_t burn_in = 100;
  std::size_t sample_every = 2;
  std::size_t collect = 20;
  AnnealSchedule rho_d{5.0, 0.025, 100};
  AnnealSchedule rho_tv{5.0, 2.0, 100};
  std::size_t batch_size = 16;
  std::size_t coverage = 1;
  std::size_t budget = 12;
  CoverRefresh cover_refresh = CoverRefresh::every_iteration;
  CoverMethod cover_method = CoverMethod::randomized;
  double tv_lambda = 0.05;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::size_t checkpoint_every = 0;
  std::string checkpoint_path;
  bool keep_samples = false;

  void validate(std::size_t depth) const {
    require(iterations >= 1, "chain needs at least one iteration");
    require(sample_every >= 1, "sample_every must be >= 1");
    require(burn_in + collect * sample_every <= iterations,
            "burn_in + collect * sample_every (" + std::to_string(burn_in + collect * sample_every) +
                ") exceeds iterations (" + std::to_string(iterations) + ")");
    rho_d.validate();
    rho_tv.validate();
    require(std::isfinite(tv_lambda) && tv_lambda >= 0.0, "tv_lambda must be >= 0");
    cover_spec(depth, 0).validate();
  }

  CoverSpec cover_spec(std::size_t depth, std::uint64_t cover_seed) const {
    return CoverSpec{depth, batch_size, coverage, budget, cover_seed};
  }
};

/// Per-step noise multipliers; 1 in normal use, 0 to freeze a step's noise.
struct NoiseScales {
  double likelihood = 1.0;
  double prior = 1.0;
  double tv = 1.0;
};

/// Welford accumulator over collected x samples.
struct RunningMoments {
  std::size_t count = 0;
  std::vector<double> mean;
  std::vector<double> m2;

  void add(std::span<const float> x) {
    if (mean.empty()) {
      mean.assign(x.size(), 0.0);
      m2.assign(x.size(), 0.0);
    }
    require(x.size() == mean.size(), "moment accumulator size mismatch");
    ++count;
    const double n = static_cast<double>(count);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i];
      const double delta = v - mean[i];
      mean[i] += delta / n;
      m2[i] += delta * (v - mean[i]);
    }
  }
};

struct ChainState {
  Volume x, z, w;
  std::size_t iteration = 0;
  std::uint64_t seed = 0;
  RunningMoments moments;
  std::vector<std::size_t> sample_iterations;
  std::vector<Volume> samples;
};

struct ProgressRecord {
  std::size_t iteration = 0;
  double rho_d = 0.0;
  double rho_tv = 0.0;
  double resid = 0.0;
  double secs = 0.0;
  double likelihood_secs = 0.0;
  double prior_secs = 0.0;
  double tv_secs = 0.0;
};

inline std::string format_progress(const ProgressRecord& r) {
  std::ostringstream os;
  os << std::setprecision(9) << "iter=" << r.iteration << " rho_d=" << r.rho_d << " rho_tv=" << r.rho_tv
     << " resid=" << r.resid << " secs=" << r.secs;
  return os.str();
}

struct ChainHooks {
  std::function<void(const ProgressRecord&)> progress;
  /// Called with (iteration count, x) for every collected sample.
  std::function<void(std::size_t, const Volume&)> on_sample;
  NoiseScales noise;
};

/// Raised when an iteration fails; the state before that iteration was saved
/// to `checkpoint` when a checkpoint path is configured.
class ChainAborted : public std::runtime_error {
 public:
  ChainAborted(const std::string& what, std::exception_ptr cause, std::string checkpoint)
      : std::runtime_error(what), cause_(std::move(cause)), checkpoint_(std::move(checkpoint)) {}
  std::exception_ptr cause() const noexcept { return cause_; }
  const std::string& checkpoint() const noexcept { return checkpoint_; }

 private:
  std::exception_ptr cause_;
  std::string checkpoint_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "PSI3DCK1", u32 version, then little-endian fields.

inline void save_checkpoint(const ChainState& s, const std::string& path) {
  binary::Writer w;
  w.put_text("PSI3DCK1");
  w.put_u32(1);
  const Dims d = s.x.dims();
  w.put_u64(d.depth);
  w.put_u64(d.height);
  w.put_u64(d.width);
  w.put_u64(s.iteration);
  w.put_u64(s.seed);
  for (const Volume* v : {&s.x, &s.z, &s.w})
    for (float f : v->data()) w.put_f32(f);
  w.put_u64(s.moments.count);
  w.put_u64(s.moments.mean.size());
  for (double v : s.moments.mean) w.put_f64(v);
  for (double v : s.moments.m2) w.put_f64(v);
  w.put_u64(s.sample_iterations.size());
  for (std::size_t it : s.sample_iterations) w.put_u64(it);
  const std::filesystem::path tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InvalidInput("cannot write checkpoint " + tmp.string());
    os.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
    if (!os) throw InvalidInput("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline ChainState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("cannot open checkpoint " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    binary::Reader r(bytes);
    auto magic = r.get_bytes(8);
    if (std::string(magic.begin(), magic.end()) != "PSI3DCK1") throw InvalidInput("not a checkpoint: " + path);
    if (r.get_u32() != 1) throw InvalidInput("unsupported checkpoint version: " + path);
    Dims d;
    d.depth = r.get_u64();
    d.height = r.get_u64();
    d.width = r.get_u64();
    ChainState s;
    s.iteration = r.get_u64();
    s.seed = r.get_u64();
    for (Volume* v : {&s.x, &s.z, &s.w}) {
      std::vector<float> data(d.size());
      for (float& f : data) f = r.get_f32();
      *v = Volume(d, std::move(data));
    }
    s.moments.count = r.get_u64();
    const std::size_t n = r.get_u64();
    s.moments.mean.resize(n);
    s.moments.m2.resize(n);
    for (double& v : s.moments.mean) v = r.get_f64();
    for (double& v : s.moments.m2) v = r.get_f64();
    s.sample_iterations.resize(r.get_u64());
    for (std::size_t& it : s.sample_iterations) it = r.get_u64();
    return s;
  } catch (const ProtocolError& e) {
    throw InvalidInput("corrupt checkpoint " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

/// x0 = z0 = w0 = A^+ y (minimum-norm data fit), computed in the V basis.
inline ChainState initial_state(const ForwardModel& model, const Volume& y, std::uint64_t seed) {
  model.require_svd();
  const Plane s2 = model.singular_grid().array().square().matrix();
  Volume x0(model.domain_dims(y.depth()));
  for (std::size_t k = 0; k < y.depth(); ++k) {
    Plane c = model.analysis(model.adjoint(y.plane(k)));
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = s2.data()[i] > 0.0 ? c.data()[i] / s2.data()[i] : 0.0;
    x0.set_plane(k, model.synthesis(c));
  }
  ChainState s;
  s.x = x0;
  s.z = x0;
  s.w = std::move(x0);
  s.seed = seed;
  return s;
}

inline BatchCover chain_cover(const ChainConfig& cfg, std::size_t depth, std::size_t t) {
  const std::size_t key = cfg.cover_refresh == CoverRefresh::once ? 0 : t;
  CoverSpec spec = cfg.cover_spec(depth, derive_seed(cfg.seed, StreamTag::cover, {key}));
  return cfg.cover_method == CoverMethod::sliding_window ? sliding_window_cover(spec) : sample_cover(spec);
}

/// RMS of y - A x over all measurement voxels.
inline double data_residual(const ForwardModel& model, const Volume& y, const Volume& x) {
  double acc = 0.0;
  for (std::size_t k = 0; k < y.depth(); ++k) acc += (y.plane(k) - model.apply(x.plane(k))).squaredNorm();
  return std::sqrt(acc / static_cast<double>(y.size()));
}

namespace detail {
inline Plane round_to_float(Plane p) {
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = static_cast<double>(static_cast<float>(p.data()[i]));
  return p;
}
}  // namespace detail

/// One full iteration t on `state` (in place).
inline void chain_iteration(const LikelihoodSampler& likelihood, const PriorSampler& prior, const ChainConfig& cfg,
                            const NoiseScales& noise, const ParallelRunner& runner, ChainState& state, std::size_t t,
                            ProgressRecord* timing = nullptr) {
  using clock = std::chrono::steady_clock;
  const Dims dims = state.x.dims();
  const double rho_d = cfg.rho_d.value(t);
  const double rho_tv = cfg.rho_tv.value(t);
  const LikelihoodStepParams lp{rho_d, rho_tv, likelihood.model().noise_sigma()};
  const TvParams tp{cfg.tv_lambda, rho_tv};
  const BatchCover cover = chain_cover(cfg, dims.depth, t);
  const std::size_t batch = cover.batch_size;
  const std::size_t columns = dims.slice_size();
  const std::size_t chunks = std::min<std::size_t>(columns, runner.threads() * 4);
  const std::uint64_t seed = state.seed;

  MergeAccumulator<float> acc_x(dims), acc_z(dims), acc_w(dims);
  PlaneBatch xs(batch), zs(batch);
  PlaneBatch ws(batch, Plane(dims.height, dims.width));
  for (std::size_t wi = 0; wi < cover.starts.size(); ++wi) {
    const std::size_t first = cover.starts[wi];
    auto t0 = clock::now();
    runner.for_each(batch, [&](std::size_t j) {
      const std::size_t s = first + j;
      NormalStream ln(derive_seed(seed, StreamTag::likelihood, {t, wi, s}), noise.likelihood);
      xs[j] = detail::round_to_float(likelihood.sample(s, state.z.plane(s), state.w.plane(s), lp, ln));
    });
    auto t1 = clock::now();
    runner.for_each(batch, [&](std::size_t j) {
      const std::size_t s = first + j;
      NormalStream pn(derive_seed(seed, StreamTag::prior, {t, wi, s}), noise.prior);
      const Slice drawn = sample_checked(prior, Slice::from_plane(xs[j], s), rho_d, pn);
      zs[j] = drawn.plane();
    });
    auto t2 = clock::now();
    const std::uint64_t tv_seed = derive_seed(seed, StreamTag::tv, {t, wi});
    runner.for_each(chunks, [&](std::size_t c) {
      tv_prior_columns(xs, tp, tv_seed, noise.tv, ws, c * columns / chunks, (c + 1) * columns / chunks);
    });
    auto t3 = clock::now();
    runner.for_each(batch, [&](std::size_t j) {
      acc_x.add(first + j, xs[j]);
      acc_z.add(first + j, zs[j]);
      acc_w.add(first + j, ws[j]);
    });
    if (timing) {
      timing->likelihood_secs += std::chrono::duration<double>(t1 - t0).count();
      timing->prior_secs += std::chrono::duration<double>(t2 - t1).count();
      timing->tv_secs += std::chrono::duration<double>(t3 - t2).count();
    }
  }
  acc_x.finish(state.x);
  acc_z.finish(state.z);
  acc_w.finish(state.w);
  state.iteration = t + 1;
}

/// Runs iterations state.iteration .. cfg.iterations - 1. The chain is a pure
/// function of (model, y, cfg, prior, seed); thread count does not matter.
inline ChainState run_chain(const ForwardModel& model, const Volume& y, const ChainConfig& cfg,
                            const PriorSampler& prior, const ChainHooks& hooks = {},
                            std::optional<ChainState> resume = std::nullopt) {
  if (y.height() != model.range_height() || y.width() != model.range_width())
    throw InvalidInput("run_chain: measurement " + y.dims().str() + " does not match model range " +
                       model.range_dims(y.depth()).str());
  cfg.validate(y.depth());
  const LikelihoodSampler likelihood(model, y);
  ChainState state = resume ? std::move(*resume) : initial_state(model, y, cfg.seed);
  if (state.x.dims() != model.domain_dims(y.depth()) || state.z.dims() != state.x.dims() ||
      state.w.dims() != state.x.dims())
    throw InvalidInput("run_chain: resumed state dims do not match the problem");
  if (resume && state.seed != cfg.seed) throw InvalidInput("run_chain: checkpoint seed differs from config seed");

  const ParallelRunner runner(cfg.threads);
  using clock = std::chrono::steady_clock;
  for (std::size_t t = state.iteration; t < cfg.iterations; ++t) {
    const auto start = clock::now();
    ProgressRecord rec;
    try {
      // Work on a copy so a failed iteration leaves `state` at the previous one.
      ChainState next_xzw;
      next_xzw.x = state.x;
      next_xzw.z = state.z;
      next_xzw.w = state.w;
      next_xzw.seed = state.seed;
      chain_iteration(likelihood, prior, cfg, hooks.noise, runner, next_xzw, t, &rec);
      state.x = std::move(next_xzw.x);
      state.z = std::move(next_xzw.z);
      state.w = std::move(next_xzw.w);
      state.iteration = t + 1;
    } catch (const std::exception& e) {
      std::string where;
      if (!cfg.checkpoint_path.empty()) {
        save_checkpoint(state, cfg.checkpoint_path);
        where = cfg.checkpoint_path;
      }
      throw ChainAborted("chain aborted at iteration " + std::to_string(t) + ": " + e.what(), std::current_exception(),
                         where);
    }

    const std::size_t done = t + 1;
    if (done > cfg.burn_in && (done - cfg.burn_in) % cfg.sample_every == 0 && state.moments.count < cfg.collect) {
      state.moments.add(state.x.data());
      state.sample_iterations.push_back(done);
      if (cfg.keep_samples) state.samples.push_back(state.x);
      if (hooks.on_sample) hooks.on_sample(done, state.x);
    }
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && done % cfg.checkpoint_every == 0)
      save_checkpoint(state, cfg.checkpoint_path);
    if (hooks.progress) {
      rec.iteration = done;
      rec.rho_d = cfg.rho_d.value(t);
      rec.rho_tv = cfg.rho_tv.value(t);
      rec.resid = data_residual(model, y, state.x);
      rec.secs = std::chrono::duration<double>(clock::now() - start).count();
      hooks.progress(rec);
    }
  }
  return state;
}

struct PosteriorSummary {
  Volume mean;
  Volume sd;
  std::size_t samples = 0;
};

/// Per-voxel mean and unbiased SD of the collected samples.
inline PosteriorSummary posterior_mean_sd(const RunningMoments& m, Dims dims) {
  if (m.count < 2) throw InvalidInput("posterior_mean_sd needs at least 2 collected samples, have " +
                                      std::to_string(m.count));
  require(m.mean.size() == dims.size(), "moment size does not match dims");
  PosteriorSummary out{Volume(dims), Volume(dims), m.count};
  const double denom = static_cast<double>(m.count - 1);
  for (std::size_t i = 0; i < m.mean.size(); ++i) {
    out.mean.storage()[i] = static_cast<float>(m.mean[i]);
    out.sd.storage()[i] = static_cast<float>(std::sqrt(std::max(m.m2[i], 0.0) / denom));
  }
  return out;
}

inline PosteriorSummary posterior_mean_sd(const ChainState& state) {
  return posterior_mean_sd(state.moments, state.x.dims());
}

inline PosteriorSummary posterior_mean_sd(std::span<const Volume> samples) {
  require(!samples.empty(), "posterior_mean_sd: no samples");
  RunningMoments m;
  for (const Volume& v : samples) {
    require_same_dims(v, samples.front(), "posterior_mean_sd");
    m.add(v.data());
  }
  return posterior_mean_sd(m, samples.front().dims());
}

}  // namespace psi3d
