#pragma once

// Exact draw of the x-conditional
//   x | z, w, y ~ N(mu, Lambda^-1),
//   Lambda = A^T A / sigma^2 + I / rho_d^2 + I / rho_tv^2,
//   mu     = Lambda^-1 (A^T y / sigma^2 + z / rho_d^2 + w / rho_tv^2),
// evaluated per slice in the V basis of the forward model where Lambda is
// diagonal with entries s_j^2 / sigma^2 + 1 / rho_d^2 + 1 / rho_tv^2.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "psi3d/errors.hpp"
#include "psi3d/forward_model.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/volume.hpp"

namespace psi3d {

struct LikelihoodStepParams {
  double rho_d = 1.0;
  double rho_tv = 1.0;
  /// Measurement noise SD. 0 is the pinned-data limit: spectral modes with
  /// s_j > 0 are set to the data value, null-space modes stay prior coupled.
  double sigma = 1.0;

  void validate() const {
    require(std::isfinite(rho_d) && rho_d > 0.0, "rho_d must be > 0");
    require(std::isfinite(rho_tv) && rho_tv > 0.0, "rho_tv must be > 0");
    require(std::isfinite(sigma) && sigma >= 0.0, "sigma must be >= 0");
  }
};

/// Per-slice likelihood sampler with the data term V^T A^T y cached.
class LikelihoodSampler {
 public:
  LikelihoodSampler(const ForwardModel& model, const Volume& y) : model_(&model) {
    model.require_svd();
    if (y.height() != model.range_height() || y.width() != model.range_width())
      throw InvalidInput("likelihood: measurement " + y.dims().str() + " does not match model range " +
                         model.range_dims(y.depth()).str());
    require_finite(y, "measurement");
    s2_ = model.singular_grid().array().square().matrix();
    data_.reserve(y.depth());
    for (std::size_t z = 0; z < y.depth(); ++z) data_.push_back(model.analysis(model.adjoint(y.plane(z))));
  }

  const ForwardModel& model() const noexcept { return *model_; }
  std::size_t depth() const noexcept { return data_.size(); }

  /// Posterior variance of every spectral mode, (s^2/sigma^2 + 1/rho_d^2 + 1/rho_tv^2)^-1.
  /// Modes pinned by the sigma = 0 limit have variance 0.
  Plane spectral_variance(const LikelihoodStepParams& p) const {
    p.validate();
    const double prior_prec = 1.0 / (p.rho_d * p.rho_d) + 1.0 / (p.rho_tv * p.rho_tv);
    Plane var(s2_.rows(), s2_.cols());
    for (Eigen::Index i = 0; i < s2_.size(); ++i) {
      const double s2 = s2_.data()[i];
      if (p.sigma == 0.0)
        var.data()[i] = s2 > 0.0 ? 0.0 : 1.0 / prior_prec;
      else
        var.data()[i] = 1.0 / (s2 / (p.sigma * p.sigma) + prior_prec);
    }
    return var;
  }

  /// Spectral coefficients of mu for slice `index`.
  Plane spectral_mean(std::size_t index, const Plane& z, const Plane& w, const LikelihoodStepParams& p) const {
    p.validate();
    require(index < data_.size(), "likelihood slice index out of range");
    check_finite(z, "z");
    check_finite(w, "w");
    const double inv_d = 1.0 / (p.rho_d * p.rho_d);
    const double inv_tv = 1.0 / (p.rho_tv * p.rho_tv);
    const Plane coupled = model_->analysis(inv_d * z + inv_tv * w);
    const Plane& data = data_[index];
    Plane mean(coupled.rows(), coupled.cols());
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
      const double s2 = s2_.data()[i];
      if (p.sigma == 0.0) {
        mean.data()[i] = s2 > 0.0 ? data.data()[i] / s2 : coupled.data()[i] / (inv_d + inv_tv);
      } else {
        const double inv_s2 = 1.0 / (p.sigma * p.sigma);
        mean.data()[i] = (data.data()[i] * inv_s2 + coupled.data()[i]) / (s2 * inv_s2 + inv_d + inv_tv);
      }
    }
    return mean;
  }

  Plane mean(std::size_t index, const Plane& z, const Plane& w, const LikelihoodStepParams& p) const {
    return model_->synthesis(spectral_mean(index, z, w, p));
  }

  /// mu + L xi with L = V diag(sqrt(spectral_variance)); xi is given in
  /// spectral coordinates.
  Plane sample_with(std::size_t index, const Plane& z, const Plane& w, const LikelihoodStepParams& p,
                    const Plane& xi) const {
    Plane coeff = spectral_mean(index, z, w, p);
    require(xi.rows() == coeff.rows() && xi.cols() == coeff.cols(), "noise plane dims mismatch");
    coeff.array() += spectral_variance(p).array().sqrt() * xi.array();
    return model_->synthesis(coeff);
  }

  Plane sample(std::size_t index, const Plane& z, const Plane& w, const LikelihoodStepParams& p,
               NormalStream& noise) const {
    Plane xi(s2_.rows(), s2_.cols());
    noise.fill(std::span<double>(xi.data(), static_cast<std::size_t>(xi.size())));
    return sample_with(index, z, w, p, xi);
  }

 private:
  static void check_finite(const Plane& p, const char* what) {
    if (!p.allFinite()) throw InvalidInput(std::string("likelihood: ") + what + " contains non-finite values");
  }

  const ForwardModel* model_;
  Plane s2_;
  std::vector<Plane> data_;
};

namespace detail {
inline void check_likelihood_inputs(const ForwardModel& model, const Volume& y, const Volume& z, const Volume& w) {
  require_same_dims(z, w, "likelihood z/w");
  if (z.height() != model.domain_height() || z.width() != model.domain_width() || z.depth() != y.depth())
    throw InvalidInput("likelihood: z " + z.dims().str() + " does not match model domain " +
                       model.domain_dims(y.depth()).str());
}
}  // namespace detail

inline Volume likelihood_mean(const ForwardModel& model, const Volume& y, const Volume& z, const Volume& w,
                              const LikelihoodStepParams& p) {
  LikelihoodSampler sampler(model, y);
  detail::check_likelihood_inputs(model, y, z, w);
  Volume out(z.dims());
  for (std::size_t s = 0; s < z.depth(); ++s) out.set_plane(s, sampler.mean(s, z.plane(s), w.plane(s), p));
  return out;
}

/// One exact draw; slice s uses the (seed, likelihood, s) substream scaled by
/// `noise_scale`.
inline Volume likelihood_sample(const ForwardModel& model, const Volume& y, const Volume& z, const Volume& w,
                                const LikelihoodStepParams& p, std::uint64_t seed, double noise_scale = 1.0) {
  LikelihoodSampler sampler(model, y);
  detail::check_likelihood_inputs(model, y, z, w);
  Volume out(z.dims());
  for (std::size_t s = 0; s < z.depth(); ++s) {
    NormalStream noise(derive_seed(seed, StreamTag::likelihood, {s}), noise_scale);
    out.set_plane(s, sampler.sample(s, z.plane(s), w.plane(s), p, noise));
  }
  return out;
}

}  // namespace psi3d
