#pragma once

// Total variation along the slice axis.
//
// tv1d_prox solves  argmin_u ½‖u − v‖² + weight · Σ|u_{i+1} − u_i|  exactly
// with Condat's direct algorithm (linear time in practice, no iterations).
// tv_prior_sample applies it to every (y, x) column of a contiguous batch with
// weight rho_tv² · lambda and adds N(0, rho_tv²) noise.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "psi3d/errors.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/volume.hpp"

namespace psi3d {

inline void tv1d_prox(std::span<const double> in, double weight, std::span<double> out) {
  require(in.size() == out.size(), "tv1d_prox: output size mismatch");
  require(weight >= 0.0 && std::isfinite(weight), "tv1d_prox: weight must be finite and >= 0");
  const std::size_t n = in.size();
  if (n == 0) return;
  if (weight == 0.0 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = in[i];
    return;
  }
  const double lambda = weight;
  const double two_lambda = 2.0 * lambda;
  const double min_lambda = -lambda;
  std::size_t k = 0, k0 = 0, kplus = 0, kminus = 0;
  double umin = lambda, umax = -lambda;
  double vmin = in[0] - lambda, vmax = in[0] + lambda;
  const std::size_t last = n - 1;
  for (;;) {
    while (k == last) {
      if (umin < 0.0) {
        do out[k0++] = vmin; while (k0 <= kminus);
        k = kminus = k0;
        vmin = in[k];
        umin = lambda;
        umax = vmin + umin - vmax;
      } else if (umax > 0.0) {
        do out[k0++] = vmax; while (k0 <= kplus);
        k = kplus = k0;
        vmax = in[k];
        umax = min_lambda;
        umin = vmax + umax - vmin;
      } else {
        vmin += umin / static_cast<double>(k - k0 + 1);
        do out[k0++] = vmin; while (k0 <= k);
        return;
      }
    }
    if ((umin += in[k + 1] - vmin) < min_lambda) {
      do out[k0++] = vmin; while (k0 <= kminus);
      k = kminus = kplus = k0;
      vmin = in[k];
      vmax = vmin + two_lambda;
      umin = lambda;
      umax = min_lambda;
    } else if ((umax += in[k + 1] - vmax) > lambda) {
      do out[k0++] = vmax; while (k0 <= kplus);
      k = kminus = kplus = k0;
      vmax = in[k];
      vmin = vmax - two_lambda;
      umin = lambda;
      umax = min_lambda;
    } else {
      ++k;
      if (umin >= lambda) {
        kminus = k;
        vmin += (umin - lambda) / static_cast<double>(kminus - k0 + 1);
        umin = lambda;
      }
      if (umax <= min_lambda) {
        kplus = k;
        vmax += (umax + lambda) / static_cast<double>(kplus - k0 + 1);
        umax = min_lambda;
      }
    }
  }
}

inline std::vector<double> tv1d_prox(std::span<const double> in, double weight) {
  std::vector<double> out(in.size());
  tv1d_prox(in, weight, out);
  return out;
}

inline double total_variation(std::span<const double> u) {
  double tv = 0.0;
  for (std::size_t i = 1; i < u.size(); ++i) tv += std::abs(u[i] - u[i - 1]);
  return tv;
}

struct TvParams {
  double lambda = 0.0;
  double rho_tv = 1.0;

  void validate() const {
    require(std::isfinite(lambda) && lambda >= 0.0, "TV lambda must be >= 0");
    require(std::isfinite(rho_tv) && rho_tv > 0.0, "rho_tv must be > 0");
  }
  double prox_weight() const noexcept { return rho_tv * rho_tv * lambda; }
};

/// Batch of slices stored as planes (slice-major). All planes share dims.
using PlaneBatch = std::vector<Plane>;

namespace detail {
inline void check_batch(const PlaneBatch& batch) {
  require(!batch.empty(), "tv_prior_sample: empty batch");
  for (const Plane& s : batch)
    require(s.rows() == batch.front().rows() && s.cols() == batch.front().cols(), "tv_prior_sample: slice dims differ");
}
}  // namespace detail

/// Processes columns [begin, end) of `batch` into `out` (already sized).
inline void tv_prior_columns(const PlaneBatch& batch, const TvParams& p, std::uint64_t seed, double noise_scale,
                             PlaneBatch& out, std::size_t begin, std::size_t end) {
  const std::size_t depth = batch.size();
  const double weight = p.prox_weight();
  const double sd = p.rho_tv * noise_scale;
  std::vector<double> column(depth), prox(depth);
  for (std::size_t c = begin; c < end; ++c) {
    for (std::size_t z = 0; z < depth; ++z) column[z] = batch[z].data()[c];
    tv1d_prox(column, weight, prox);
    NormalStream noise(derive_seed(seed, StreamTag::tv, {c}), sd);
    for (std::size_t z = 0; z < depth; ++z) out[z].data()[c] = prox[z] + noise.next();
  }
}

/// TV prior step on a contiguous batch: column c gets noise from the
/// (seed, tv, c) substream with SD rho_tv * noise_scale.
inline PlaneBatch tv_prior_sample(const PlaneBatch& batch, const TvParams& p, std::uint64_t seed,
                                  double noise_scale = 1.0) {
  p.validate();
  detail::check_batch(batch);
  PlaneBatch out(batch.size(), Plane(batch.front().rows(), batch.front().cols()));
  tv_prior_columns(batch, p, seed, noise_scale, out, 0, static_cast<std::size_t>(batch.front().size()));
  return out;
}

/// Volume form: the whole volume is the batch.
inline Volume tv_prior_sample(const Volume& batch, const TvParams& p, std::uint64_t seed, double noise_scale = 1.0) {
  PlaneBatch planes;
  planes.reserve(batch.depth());
  for (std::size_t z = 0; z < batch.depth(); ++z) planes.push_back(batch.plane(z));
  PlaneBatch out = tv_prior_sample(planes, p, seed, noise_scale);
  Volume result(batch.dims());
  for (std::size_t z = 0; z < out.size(); ++z) result.set_plane(z, out[z]);
  return result;
}

/// Batch given as slice indices of a parent volume; indices must be consecutive.
inline Volume tv_prior_sample(const Volume& parent, std::span<const std::size_t> slices, const TvParams& p,
                              std::uint64_t seed, double noise_scale = 1.0) {
  require(!slices.empty(), "tv_prior_sample: empty batch");
  for (std::size_t i = 1; i < slices.size(); ++i)
    if (slices[i] != slices[i - 1] + 1) throw InvalidInput("tv_prior_sample: batch slices are not contiguous in z");
  require(slices.back() < parent.depth(), "tv_prior_sample: slice index out of range");
  return tv_prior_sample(parent.sub_depth(slices.front(), slices.size()), p, seed, noise_scale);
}

}  // namespace psi3d
