#pragma once

// Denoising-posterior samplers: draw z ~ p(z | x) ∝ p_prior(z) N(x; z, rho^2 I).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "psi3d/errors.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/volume.hpp"

namespace psi3d {

class PriorSampler {
 public:
  virtual ~PriorSampler() = default;

  /// One draw from the denoising posterior at noise level rho. Implementations
  /// must be safe to call concurrently.
  virtual Slice sample(const Slice& noisy, double rho, NormalStream& noise) const = 0;

  virtual std::string name() const = 0;
};

struct SliceDiagnostics {
  bool finite = true;
  bool constant = true;
  double variance = 0.0;
};

inline SliceDiagnostics diagnose(const Slice& s) {
  SliceDiagnostics d;
  d.finite = all_finite(s.values);
  if (!d.finite || s.values.empty()) return d;
  const auto [lo, hi] = std::minmax_element(s.values.begin(), s.values.end());
  d.constant = *lo == *hi;
  double mean = 0.0;
  for (double v : s.values) mean += v;
  mean /= static_cast<double>(s.values.size());
  double acc = 0.0;
  for (double v : s.values) acc += (v - mean) * (v - mean);
  d.variance = acc / static_cast<double>(s.values.size());
  return d;
}

/// Calls the sampler and enforces finiteness and dimension preservation.
inline Slice sample_checked(const PriorSampler& prior, const Slice& noisy, double rho, NormalStream& noise) {
  require(std::isfinite(rho) && rho > 0.0, "prior noise level rho must be > 0");
  if (!all_finite(noisy.values)) throw InvalidInput("prior input slice contains non-finite values");
  Slice out = prior.sample(noisy, rho, noise);
  if (out.height != noisy.height || out.width != noisy.width || out.values.size() != noisy.values.size())
    throw NumericalError(prior.name() + ": output dims " + std::to_string(out.height) + "x" +
                         std::to_string(out.width) + " differ from input " + std::to_string(noisy.height) + "x" +
                         std::to_string(noisy.width));
  if (!all_finite(out.values)) throw NumericalError(prior.name() + ": output contains non-finite values");
  out.index = noisy.index;
  return out;
}

/// Orthonormal basis of a slice: identity, one dense n x n matrix acting on
/// row-major vec(X), or a separable pair acting as Q_y^T X Q_x.
class SliceBasis {
 public:
  enum class Kind { identity, dense, separable };

  static SliceBasis identity(std::size_t h, std::size_t w) { return SliceBasis(Kind::identity, h, w); }
  static SliceBasis dense(Eigen::MatrixXd q, std::size_t h, std::size_t w) {
    SliceBasis b(Kind::dense, h, w);
    b.q_ = std::move(q);
    return b;
  }
  static SliceBasis separable(Eigen::MatrixXd qy, Eigen::MatrixXd qx) {
    SliceBasis b(Kind::separable, static_cast<std::size_t>(qy.rows()), static_cast<std::size_t>(qx.rows()));
    b.qy_ = std::move(qy);
    b.qx_ = std::move(qx);
    return b;
  }

  Kind kind() const noexcept { return kind_; }

  Plane analysis(const Plane& x) const {
    switch (kind_) {
      case Kind::identity: return x;
      case Kind::dense: return vec_apply(q_.transpose(), x);
      case Kind::separable: return qy_.transpose() * x * qx_;
    }
    return x;
  }
  Plane synthesis(const Plane& c) const {
    switch (kind_) {
      case Kind::identity: return c;
      case Kind::dense: return vec_apply(q_, c);
      case Kind::separable: return qy_ * c * qx_.transpose();
    }
    return c;
  }

 private:
  SliceBasis(Kind k, std::size_t h, std::size_t w) : kind_(k), h_(h), w_(w) {}

  template <class M>
  Plane vec_apply(const M& m, const Plane& x) const {
    Eigen::Map<const Eigen::VectorXd> v(x.data(), x.size());
    Eigen::VectorXd out = m * v;
    Plane p(x.rows(), x.cols());
    std::copy(out.data(), out.data() + out.size(), p.data());
    return p;
  }

  Kind kind_;
  std::size_t h_, w_;
  Eigen::MatrixXd q_, qy_, qx_;
};

/// Gaussian prior N(m, P^-1) on a slice. The precision is stored in its
/// eigenbasis, which makes every denoising posterior diagonal:
///   mode j: precision lambda_j + 1/rho^2, mean (lambda_j m_j + x_j/rho^2) / (lambda_j + 1/rho^2).
class GaussianAnalyticPrior final : public PriorSampler {
 public:
  /// Independent voxels with per-voxel precision.
  static GaussianAnalyticPrior diagonal(Plane mean, Plane precision) {
    require(mean.rows() == precision.rows() && mean.cols() == precision.cols(), "mean/precision dims mismatch");
    require(precision.allFinite() && (precision.array() > 0.0).all(), "precision must be positive definite");
    const auto h = static_cast<std::size_t>(mean.rows());
    const auto w = static_cast<std::size_t>(mean.cols());
    return GaussianAnalyticPrior(std::move(mean), SliceBasis::identity(h, w), std::move(precision));
  }

  static GaussianAnalyticPrior isotropic(Plane mean, double variance) {
    require(variance > 0.0 && std::isfinite(variance), "prior variance must be > 0");
    Plane prec = Plane::Constant(mean.rows(), mean.cols(), 1.0 / variance);
    return diagonal(std::move(mean), std::move(prec));
  }

  /// Dense SPD precision acting on row-major vec(slice).
  static GaussianAnalyticPrior dense(Plane mean, const Eigen::MatrixXd& precision) {
    const auto n = mean.size();
    require(precision.rows() == n && precision.cols() == n, "dense precision must be n x n with n = H*W");
    require(precision.allFinite(), "precision contains non-finite entries");
    require((precision - precision.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + precision.cwiseAbs().maxCoeff()),
            "precision must be symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(precision);
    require(eig.info() == Eigen::Success, "precision eigendecomposition failed");
    require(eig.eigenvalues().minCoeff() > 0.0, "precision must be positive definite");
    Plane lambda(mean.rows(), mean.cols());
    std::copy(eig.eigenvalues().data(), eig.eigenvalues().data() + n, lambda.data());
    const auto h = static_cast<std::size_t>(mean.rows());
    const auto w = static_cast<std::size_t>(mean.cols());
    return GaussianAnalyticPrior(std::move(mean), SliceBasis::dense(eig.eigenvectors(), h, w), std::move(lambda));
  }

  /// Covariance sigma_s * (C_y ⊗ C_x) + nugget * I, i.e. a separable field plus
  /// white noise. Shares the separable eigenbasis of C_y and C_x.
  static GaussianAnalyticPrior separable(Plane mean, const Eigen::MatrixXd& cov_y, const Eigen::MatrixXd& cov_x,
                                         double nugget = 0.0) {
    require(cov_y.rows() == mean.rows() && cov_x.rows() == mean.cols(), "separable covariance dims mismatch");
    require(nugget >= 0.0, "nugget must be >= 0");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ey(cov_y), ex(cov_x);
    require(ey.info() == Eigen::Success && ex.info() == Eigen::Success, "covariance eigendecomposition failed");
    Plane cov_eig = ey.eigenvalues().cwiseMax(0.0) * ex.eigenvalues().cwiseMax(0.0).transpose();
    cov_eig.array() += nugget;
    require((cov_eig.array() > 0.0).all(), "separable covariance is singular; add a nugget");
    Plane lambda = cov_eig.cwiseInverse();
    return GaussianAnalyticPrior(std::move(mean), SliceBasis::separable(ey.eigenvectors(), ex.eigenvectors()),
                                 std::move(lambda));
  }

  /// Squared-exponential correlation matrix exp(-d^2 / (2 l^2)); l = 0 gives I.
  static Eigen::MatrixXd squared_exponential(std::size_t n, double length_scale) {
    const auto nn = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd c = Eigen::MatrixXd::Identity(nn, nn);
    if (length_scale <= 0.0) return c;
    for (Eigen::Index i = 0; i < nn; ++i)
      for (Eigen::Index j = 0; j < nn; ++j) {
        const double d = static_cast<double>(i - j);
        c(i, j) = std::exp(-d * d / (2.0 * length_scale * length_scale));
      }
    return c;
  }

  Slice sample(const Slice& noisy, double rho, NormalStream& noise) const override {
    require(rho > 0.0, "rho must be > 0");
    check_dims(noisy);
    const Plane xt = basis_.analysis(Plane(noisy.plane()));
    const double inv_r2 = 1.0 / (rho * rho);
    Plane c(xt.rows(), xt.cols());
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      const double lam = lambda_.data()[i];
      const double prec = lam + inv_r2;
      c.data()[i] = (lam * mean_t_.data()[i] + xt.data()[i] * inv_r2) / prec;
    }
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] += noise.next() / std::sqrt(lambda_.data()[i] + inv_r2);
    return Slice::from_plane(basis_.synthesis(c), noisy.index);
  }

  /// Score of the noise-smoothed prior N(m, P^-1 + sigma^2 I) at u.
  Plane score(const Plane& u, double sigma) const {
    Plane c = basis_.analysis(u - mean_);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] /= -(1.0 / lambda_.data()[i] + sigma * sigma);
    return basis_.synthesis(c);
  }

  Plane posterior_mean(const Slice& noisy, double rho) const {
    NormalStream zero = NormalStream::silent();
    const Slice s = sample(noisy, rho, zero);
    return s.plane();
  }

  /// Dense covariance (P + I/rho^2)^-1 on row-major vec(slice). Small slices only.
  Eigen::MatrixXd posterior_covariance(double rho) const {
    const auto n = mean_.size();
    Eigen::MatrixXd cov(n, n);
    const double inv_r2 = 1.0 / (rho * rho);
    for (Eigen::Index j = 0; j < n; ++j) {
      Plane e = Plane::Zero(mean_.rows(), mean_.cols());
      e.data()[j] = 1.0;
      Plane c = basis_.analysis(e);
      for (Eigen::Index i = 0; i < n; ++i) c.data()[i] /= lambda_.data()[i] + inv_r2;
      Plane col = basis_.synthesis(c);
      cov.col(j) = Eigen::Map<const Eigen::VectorXd>(col.data(), n);
    }
    return cov;
  }

  const Plane& mean() const noexcept { return mean_; }
  std::size_t height() const noexcept { return static_cast<std::size_t>(mean_.rows()); }
  std::size_t width() const noexcept { return static_cast<std::size_t>(mean_.cols()); }
  std::string name() const override { return "gaussian"; }

 private:
  GaussianAnalyticPrior(Plane mean, SliceBasis basis, Plane lambda)
      : mean_(std::move(mean)), basis_(std::move(basis)), lambda_(std::move(lambda)) {
    mean_t_ = basis_.analysis(mean_);
  }

  void check_dims(const Slice& s) const {
    if (s.height != height() || s.width != width())
      throw InvalidInput("gaussian prior: slice " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                         " does not match prior " + std::to_string(height()) + "x" + std::to_string(width()));
  }

  Plane mean_;
  SliceBasis basis_;
  Plane lambda_;
  Plane mean_t_;
};

/// Churn policy of the reverse sampler.
enum class ChurnMode {
  none,         ///< deterministic probability-flow ODE
  classic,      ///< gamma = min(S_churn / N, sqrt(2) - 1) inside [S_tmin, S_tmax]
  reverse_sde,  ///< stochastic Heun on the reverse SDE, noise variance t_i^2 - t_{i+1}^2 per step
};

struct EdmParams {
  std::size_t steps = 32;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho_exponent = 7.0;  ///< time-step spacing exponent
  ChurnMode churn = ChurnMode::reverse_sde;
  double s_churn = 0.0;
  double s_tmin = 0.0;
  double s_tmax = 1e30;
  double s_noise = 1.0;

  void validate() const {
    require(steps >= 1, "EDM steps must be >= 1");
    require(sigma_min > 0.0 && sigma_min < sigma_max, "EDM requires 0 < sigma_min < sigma_max");
    require(rho_exponent > 0.0, "EDM time-step exponent must be > 0");
    require(s_churn >= 0.0 && s_noise >= 0.0, "EDM churn and noise scales must be >= 0");
  }
};

/// Noise levels t_0 > ... > t_{N-1} between sigma_start and sigma_min, then t_N = 0.
inline std::vector<double> edm_time_steps(double sigma_start, const EdmParams& p) {
  std::vector<double> t(p.steps + 1, 0.0);
  const double inv = 1.0 / p.rho_exponent;
  const double a = std::pow(sigma_start, inv);
  const double b = std::pow(p.sigma_min, inv);
  for (std::size_t i = 0; i < p.steps; ++i) {
    const double frac = p.steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(p.steps - 1);
    t[i] = std::pow(a + frac * (b - a), p.rho_exponent);
  }
  t[0] = sigma_start;
  t[p.steps] = 0.0;
  return t;
}

/// Reverse-diffusion sampler driven by a score field s(u, sigma) ≈ ∇ log p_sigma(u).
/// Starts at the noisy slice itself at noise level rho and runs Heun steps
/// (Euler on the final step to 0), either on the reverse SDE or on the
/// probability-flow ODE with optional churn.
class ScorePrior final : public PriorSampler {
 public:
  using ScoreFn = std::function<Plane(const Plane& u, double sigma)>;

  ScorePrior(ScoreFn score, EdmParams params) : score_(std::move(score)), params_(params) {
    require(static_cast<bool>(score_), "score function is empty");
    params_.validate();
  }

  const EdmParams& params() const noexcept { return params_; }
  std::size_t clamp_count() const noexcept { return clamps_.load(std::memory_order_relaxed); }

  Slice sample(const Slice& noisy, double rho, NormalStream& noise) const override {
    double start = rho;
    if (rho < params_.sigma_min || rho > params_.sigma_max) {
      start = std::clamp(rho, params_.sigma_min, params_.sigma_max);
      clamps_.fetch_add(1, std::memory_order_relaxed);
      log::warn("score prior: rho " + std::to_string(rho) + " clamped to " + std::to_string(start));
    }
    const std::vector<double> t = edm_time_steps(start, params_);
    const std::size_t n = params_.steps;
    Plane x = noisy.plane();
    Plane eps(x.rows(), x.cols());
    if (params_.churn == ChurnMode::reverse_sde) {
      // Stochastic Heun on dx = -2t s(x, t) dt + sqrt(2t) dW, run from t = rho
      // down to 0. The noise increment is shared by predictor and corrector.
      for (std::size_t i = 0; i < n; ++i) {
        const double t_cur = t[i];
        const double t_next = t[i + 1];
        noise.fill(std::span<double>(eps.data(), static_cast<std::size_t>(eps.size())));
        const Plane kick = std::sqrt(std::max(t_cur * t_cur - t_next * t_next, 0.0)) * params_.s_noise * eps;
        const Plane f = 2.0 * t_cur * checked_score(x, t_cur);
        Plane x_next = x + (t_cur - t_next) * f + kick;
        if (t_next > 0.0) {
          const Plane f_next = 2.0 * t_next * checked_score(x_next, t_next);
          x_next = x + (t_cur - t_next) * 0.5 * (f + f_next) + kick;
        }
        x = std::move(x_next);
      }
      return Slice::from_plane(x, noisy.index);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double t_cur = t[i];
      const double t_next = t[i + 1];
      const double gamma = churn_gamma(t_cur, t_next);
      const double t_hat = t_cur * (1.0 + gamma);
      Plane x_hat = x;
      if (gamma > 0.0) {
        noise.fill(std::span<double>(eps.data(), static_cast<std::size_t>(eps.size())));
        x_hat += std::sqrt(t_hat * t_hat - t_cur * t_cur) * params_.s_noise * eps;
      }
      const Plane d = -t_hat * checked_score(x_hat, t_hat);
      Plane x_next = x_hat + (t_next - t_hat) * d;
      if (t_next > 0.0) {
        const Plane d_next = -t_next * checked_score(x_next, t_next);
        x_next = x_hat + (t_next - t_hat) * (0.5 * d + 0.5 * d_next);
      }
      x = std::move(x_next);
    }
    return Slice::from_plane(x, noisy.index);
  }

  std::string name() const override { return "score"; }

 private:
  double churn_gamma(double t_cur, double t_next) const {
    switch (params_.churn) {
      case ChurnMode::none:
        return 0.0;
      case ChurnMode::classic:
        if (params_.s_churn <= 0.0 || t_cur < params_.s_tmin || t_cur > params_.s_tmax) return 0.0;
        return std::min(params_.s_churn / static_cast<double>(params_.steps), std::sqrt(2.0) - 1.0);
      case ChurnMode::reverse_sde:
        return 0.0;  // handled by the SDE branch of sample()
    }
    return 0.0;
  }

  Plane checked_score(const Plane& u, double sigma) const {
    Plane s = score_(u, sigma);
    if (s.rows() != u.rows() || s.cols() != u.cols())
      throw NumericalError("score function returned wrong dims at sigma=" + std::to_string(sigma));
    if (!s.allFinite()) throw NumericalError("score function returned non-finite values at sigma=" + std::to_string(sigma));
    return s;
  }

  ScoreFn score_;
  EdmParams params_;
  mutable std::atomic<std::size_t> clamps_{0};
};

/// Encoder/decoder pair and the map from image-space rho to the latent
/// starting noise level.
struct LatentAdapter {
  std::function<Slice(const Slice&)> encoder;
  std::function<Slice(const Slice&)> decoder;
  std::function<double(double)> start_noise = [](double rho) { return rho; };
};

/// Samples in latent space and decodes. An approximation of the image-space
/// denoising posterior whenever the adapter is nonlinear.
class LatentPrior final : public PriorSampler {
 public:
  LatentPrior(std::shared_ptr<const PriorSampler> inner, LatentAdapter adapter)
      : inner_(std::move(inner)), adapter_(std::move(adapter)) {
    require(inner_ != nullptr, "latent prior needs an inner sampler");
    require(adapter_.encoder && adapter_.decoder && adapter_.start_noise, "latent adapter is incomplete");
  }

  Slice sample(const Slice& noisy, double rho, NormalStream& noise) const override {
    Slice latent = adapter_.encoder(noisy);
    const double latent_rho = adapter_.start_noise(rho);
    if (!(latent_rho > 0.0) || !std::isfinite(latent_rho))
      throw NumericalError("latent start-noise schedule returned " + std::to_string(latent_rho));
    Slice drawn = sample_checked(*inner_, latent, latent_rho, noise);
    Slice out = adapter_.decoder(drawn);
    if (out.height != noisy.height || out.width != noisy.width)
      throw InvalidInput("latent adapter: decoder(encoder(slice)) changes dims");
    const SliceDiagnostics diag = diagnose(out);
    if (!diag.finite) throw NumericalError("latent decoder produced non-finite values");
    if (diag.constant) {
      degenerate_.fetch_add(1, std::memory_order_relaxed);
      log::warn("latent prior: decoder returned a constant slice");
    }
    out.index = noisy.index;
    return out;
  }

  std::size_t degenerate_outputs() const noexcept { return degenerate_.load(std::memory_order_relaxed); }
  std::string name() const override { return "latent(" + inner_->name() + ")"; }

 private:
  std::shared_ptr<const PriorSampler> inner_;
  LatentAdapter adapter_;
  mutable std::atomic<std::size_t> degenerate_{0};
};

inline std::shared_ptr<LatentPrior> wrap_latent(std::shared_ptr<const PriorSampler> prior, LatentAdapter adapter) {
  return std::make_shared<LatentPrior>(std::move(prior), std::move(adapter));
}

}  // namespace psi3d
