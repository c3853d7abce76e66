#pragma once

// Synthetic test volumes.
//   layered              curved horizontal layers with distinct intensities and
//                        multiplicative speckle, clipped to [0, 1]
//   gaussian_field       mean + sqrt(variance) * (L_z ⊗ L_y ⊗ L_x) eps with
//                        squared-exponential correlations per axis
//   piecewise_constant_z columns constant on equal z segments

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "psi3d/errors.hpp"
#include "psi3d/prior.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/volume.hpp"

namespace psi3d {

enum class PhantomKind { layered, gaussian_field, piecewise_constant_z };

inline std::string to_string(PhantomKind k) {
  switch (k) {
    case PhantomKind::layered: return "layered";
    case PhantomKind::gaussian_field: return "gaussian_field";
    case PhantomKind::piecewise_constant_z: return "piecewise_constant_z";
  }
  return "?";
}

inline PhantomKind parse_phantom_kind(const std::string& s) {
  if (s == "layered") return PhantomKind::layered;
  if (s == "gaussian_field") return PhantomKind::gaussian_field;
  if (s == "piecewise_constant_z") return PhantomKind::piecewise_constant_z;
  throw InvalidInput("unknown phantom kind '" + s + "' (layered, gaussian_field, piecewise_constant_z)");
}

struct PhantomSpec {
  Dims dims{16, 64, 64};
  PhantomKind kind = PhantomKind::layered;
  std::uint64_t seed = 0;

  // layered
  std::size_t layers = 5;
  double roughness = 2.0;  ///< interface displacement amplitude in pixels, [0, H/4]
  double speckle = 0.1;    ///< multiplicative speckle strength, [0, 1]

  // gaussian_field
  double mean = 0.0;
  double variance = 1.0;
  double length_z = 0.0;  ///< correlation lengths in voxels; 0 = independent
  double length_y = 0.0;
  double length_x = 0.0;

  // piecewise_constant_z
  std::size_t segments = 2;

  void validate() const {
    require(dims.depth >= 4 && dims.height >= 8 && dims.width >= 8,
            "phantom dims " + dims.str() + " below minimum 4x8x8");
    switch (kind) {
      case PhantomKind::layered:
        require(layers >= 1 && layers <= dims.height / 2, "layered: layers must be in [1, H/2]");
        require(roughness >= 0.0 && roughness <= static_cast<double>(dims.height) / 4.0,
                "layered: roughness must be in [0, H/4]");
        require(speckle >= 0.0 && speckle <= 1.0, "layered: speckle must be in [0, 1]");
        break;
      case PhantomKind::gaussian_field:
        require(std::isfinite(mean), "gaussian_field: mean must be finite");
        require(variance > 0.0 && std::isfinite(variance), "gaussian_field: variance must be > 0");
        require(length_z >= 0.0 && length_y >= 0.0 && length_x >= 0.0, "gaussian_field: length scales must be >= 0");
        break;
      case PhantomKind::piecewise_constant_z:
        require(segments >= 1 && segments <= dims.depth, "piecewise_constant_z: segments must be in [1, depth]");
        break;
    }
  }
};

namespace detail {

/// Symmetric square root of a squared-exponential correlation matrix.
inline Eigen::MatrixXd se_sqrt(std::size_t n, double length) {
  if (length <= 0.0) return Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  Eigen::MatrixXd c = GaussianAnalyticPrior::squared_exponential(n, length);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c);
  const Eigen::VectorXd s = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * s.asDiagonal() * eig.eigenvectors().transpose();
}

inline Volume layered(const PhantomSpec& p, SplitMix64& bits, NormalStream&) {
  const Dims d = p.dims;
  Volume v(d);
  const double h = static_cast<double>(d.height);
  const double two_pi = 2.0 * std::numbers::pi;
  // Layer intensities alternate bright / dark so every interface has contrast.
  std::vector<double> level(p.layers + 1);
  for (std::size_t i = 0; i <= p.layers; ++i)
    level[i] = (i % 2 == 0 ? 0.2 : 0.6) + 0.3 * bits.uniform();
  struct Wave {
    double amp, fx, fz, phase;
  };
  std::vector<std::vector<Wave>> waves(p.layers);
  std::vector<double> base(p.layers);
  for (std::size_t i = 0; i < p.layers; ++i) {
    base[i] = h * (static_cast<double>(i) + 1.0) / (static_cast<double>(p.layers) + 1.0);
    for (int k = 0; k < 3; ++k)
      waves[i].push_back({p.roughness * (0.5 + 0.5 * bits.uniform()) / (1.0 + k), 0.5 + 1.5 * bits.uniform() * (k + 1),
                          0.3 + 0.7 * bits.uniform() * (k + 1), two_pi * bits.uniform()});
  }
  for (std::size_t z = 0; z < d.depth; ++z)
    for (std::size_t x = 0; x < d.width; ++x) {
      std::vector<double> iface(p.layers);
      const double u = static_cast<double>(x) / static_cast<double>(d.width);
      const double t = static_cast<double>(z) / static_cast<double>(d.depth);
      for (std::size_t i = 0; i < p.layers; ++i) {
        double off = 0.0;
        for (const Wave& w : waves[i]) off += w.amp * std::sin(two_pi * (w.fx * u + w.fz * t) + w.phase);
        iface[i] = base[i] + off;
      }
      for (std::size_t i = 1; i < p.layers; ++i) iface[i] = std::max(iface[i], iface[i - 1] + 1.0);
      for (std::size_t y = 0; y < d.height; ++y) {
        const double yc = static_cast<double>(y) + 0.5;
        std::size_t layer = 0;
        while (layer < p.layers && yc > iface[layer]) ++layer;
        v(z, y, x) = static_cast<float>(level[layer]);
      }
    }
  if (p.speckle > 0.0) {
    const double rayleigh_mean = std::sqrt(std::numbers::pi / 2.0);
    for (float& f : v.storage()) {
      const double r = std::sqrt(-2.0 * std::log(1.0 - bits.uniform())) / rayleigh_mean;
      const double val = f * ((1.0 - p.speckle) + p.speckle * r);
      f = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
  }
  return v;
}

inline Volume gaussian_field(const PhantomSpec& p, SplitMix64&, NormalStream& noise) {
  const Dims d = p.dims;
  const Eigen::MatrixXd lz = se_sqrt(d.depth, p.length_z);
  const Eigen::MatrixXd ly = se_sqrt(d.height, p.length_y);
  const Eigen::MatrixXd lx = se_sqrt(d.width, p.length_x);
  std::vector<Plane> planes(d.depth);
  for (auto& pl : planes) {
    pl.resize(static_cast<Eigen::Index>(d.height), static_cast<Eigen::Index>(d.width));
    noise.fill(std::span<double>(pl.data(), static_cast<std::size_t>(pl.size())));
    pl = ly * pl * lx.transpose();
  }
  Volume v(d);
  const double sd = std::sqrt(p.variance);
  for (std::size_t z = 0; z < d.depth; ++z) {
    Plane acc = Plane::Zero(static_cast<Eigen::Index>(d.height), static_cast<Eigen::Index>(d.width));
    for (std::size_t k = 0; k < d.depth; ++k) {
      const double c = lz(static_cast<Eigen::Index>(z), static_cast<Eigen::Index>(k));
      if (c != 0.0) acc += c * planes[k];
    }
    v.set_plane(z, (acc.array() * sd + p.mean).matrix());
  }
  return v;
}

inline Volume piecewise_constant_z(const PhantomSpec& p, SplitMix64& bits, NormalStream&) {
  const Dims d = p.dims;
  Volume v(d);
  for (std::size_t c = 0; c < d.slice_size(); ++c) {
    std::vector<double> levels(p.segments);
    for (double& l : levels) l = bits.uniform();
    for (std::size_t z = 0; z < d.depth; ++z) {
      const std::size_t seg = z * p.segments / d.depth;
      v.storage()[z * d.slice_size() + c] = static_cast<float>(levels[seg]);
    }
  }
  return v;
}

}  // namespace detail

/// Deterministic in (spec, seed).
inline Volume generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  SplitMix64 bits(derive_seed(spec.seed, StreamTag::phantom, {static_cast<std::uint64_t>(spec.kind)}));
  NormalStream noise(derive_seed(spec.seed, StreamTag::phantom, {static_cast<std::uint64_t>(spec.kind), 1}), 1.0);
  switch (spec.kind) {
    case PhantomKind::layered: return detail::layered(spec, bits, noise);
    case PhantomKind::gaussian_field: return detail::gaussian_field(spec, bits, noise);
    case PhantomKind::piecewise_constant_z: return detail::piecewise_constant_z(spec, bits, noise);
  }
  throw InvalidInput("unknown phantom kind");
}

/// Separable Gaussian prior fitted to training volumes: empirical mean slice,
/// row and column covariances of the residuals, scaled so that
/// C_y ⊗ C_x has the empirical per-voxel variance, plus a white nugget equal
/// to `nugget_fraction` of that variance.
inline GaussianAnalyticPrior fit_gaussian_prior(std::span<const Volume> training, double nugget_fraction = 0.05) {
  require(!training.empty(), "fit_gaussian_prior: no training volumes");
  require(nugget_fraction > 0.0, "fit_gaussian_prior: nugget_fraction must be > 0");
  const auto h = static_cast<Eigen::Index>(training.front().height());
  const auto w = static_cast<Eigen::Index>(training.front().width());
  Plane mean = Plane::Zero(h, w);
  std::size_t n = 0;
  for (const Volume& v : training) {
    require(v.height() == training.front().height() && v.width() == training.front().width(),
            "fit_gaussian_prior: slice dims differ across training volumes");
    for (std::size_t z = 0; z < v.depth(); ++z, ++n) mean += v.plane(z);
  }
  mean /= static_cast<double>(n);
  Eigen::MatrixXd cy = Eigen::MatrixXd::Zero(h, h), cx = Eigen::MatrixXd::Zero(w, w);
  double total = 0.0;
  for (const Volume& v : training)
    for (std::size_t z = 0; z < v.depth(); ++z) {
      const Plane r = v.plane(z) - mean;
      cy += r * r.transpose();
      cx += r.transpose() * r;
      total += r.squaredNorm();
    }
  require(n >= 2 && total > 0.0, "fit_gaussian_prior: training data has no variation");
  const double voxel_var = total / static_cast<double>(n * h * w);
  // E[R R^T] = tr(C_x) C_y for a separable field; normalise both to unit trace
  // per dimension, then carry the variance in C_y.
  cy /= cy.trace() / static_cast<double>(h);
  cx /= cx.trace() / static_cast<double>(w);
  cy *= voxel_var * (1.0 - nugget_fraction);
  return GaussianAnalyticPrior::separable(std::move(mean), cy, cx, voxel_var * nugget_fraction);
}

}  // namespace psi3d
