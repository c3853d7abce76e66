#pragma once

// Comparison reconstructions: separable bilinear / bicubic upsampling and
// 3D isotropic TV denoising by Chambolle's dual projection.
//
// Output pixel i samples the input at (i + 0.5) / k - 0.5, i.e. block centres
// line up with the block-average forward model. Borders clamp.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "psi3d/errors.hpp"
#include "psi3d/forward_model.hpp"
#include "psi3d/volume.hpp"

namespace psi3d {

enum class Interp { bilinear, bicubic };

namespace detail {

inline double keys_cubic(double t, double a = -0.5) {
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

// Interpolation matrix (out x in) for one axis.
inline Eigen::MatrixXd interp_matrix(std::size_t n_in, std::size_t factor, Interp kind) {
  const std::size_t n_out = n_in * factor;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_out), static_cast<Eigen::Index>(n_in));
  const auto last = static_cast<std::ptrdiff_t>(n_in) - 1;
  auto clamp = [&](std::ptrdiff_t j) { return static_cast<Eigen::Index>(std::clamp<std::ptrdiff_t>(j, 0, last)); };
  for (std::size_t i = 0; i < n_out; ++i) {
    const double src = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
    const auto base = static_cast<std::ptrdiff_t>(std::floor(src));
    const double f = src - static_cast<double>(base);
    const auto r = static_cast<Eigen::Index>(i);
    if (kind == Interp::bilinear) {
      m(r, clamp(base)) += 1.0 - f;
      m(r, clamp(base + 1)) += f;
    } else {
      for (std::ptrdiff_t t = -1; t <= 2; ++t) m(r, clamp(base + t)) += keys_cubic(f - static_cast<double>(t));
    }
  }
  return m;
}

}  // namespace detail

/// Upsamples every slice by `factor` along the selected axes.
inline Volume interpolate(const Volume& meas, std::size_t factor, Interp kind,
                          DownsampleAxes axes = DownsampleAxes::both) {
  if (factor < 1) throw InvalidInput("interpolation factor must be >= 1");
  if (factor > 64) throw InvalidInput("unsupported interpolation factor " + std::to_string(factor));
  const bool on_y = axes != DownsampleAxes::x_only;
  const bool on_x = axes != DownsampleAxes::y_only;
  const std::size_t fy = on_y ? factor : 1, fx = on_x ? factor : 1;
  const Eigen::MatrixXd my = detail::interp_matrix(meas.height(), fy, kind);
  const Eigen::MatrixXd mx = detail::interp_matrix(meas.width(), fx, kind);
  Volume out(Dims{meas.depth(), meas.height() * fy, meas.width() * fx});
  for (std::size_t z = 0; z < meas.depth(); ++z) out.set_plane(z, my * meas.plane(z) * mx.transpose());
  return out;
}

inline Volume bilinear(const Volume& meas, std::size_t factor, DownsampleAxes axes = DownsampleAxes::both) {
  return interpolate(meas, factor, Interp::bilinear, axes);
}
inline Volume bicubic(const Volume& meas, std::size_t factor, DownsampleAxes axes = DownsampleAxes::both) {
  return interpolate(meas, factor, Interp::bicubic, axes);
}

struct Tv3dParams {
  double weight = 0.1;
  double tol = 1e-6;  ///< relative duality gap
  std::size_t max_iter = 5000;
};

struct Tv3dResult {
  Volume u;
  std::size_t iterations = 0;
  double gap = 0.0;  ///< final relative duality gap
};

namespace tv3d {

using Field = std::vector<double>;

struct Grid {
  std::size_t d, h, w;
  std::size_t size() const { return d * h * w; }
  std::size_t at(std::size_t z, std::size_t y, std::size_t x) const { return (z * h + y) * w + x; }
};

// Forward differences with Neumann boundary.
inline void gradient(const Grid& g, const Field& u, std::array<Field, 3>& out) {
  for (auto& f : out) f.assign(g.size(), 0.0);
  for (std::size_t z = 0; z < g.d; ++z)
    for (std::size_t y = 0; y < g.h; ++y)
      for (std::size_t x = 0; x < g.w; ++x) {
        const std::size_t i = g.at(z, y, x);
        if (z + 1 < g.d) out[0][i] = u[g.at(z + 1, y, x)] - u[i];
        if (y + 1 < g.h) out[1][i] = u[g.at(z, y + 1, x)] - u[i];
        if (x + 1 < g.w) out[2][i] = u[g.at(z, y, x + 1)] - u[i];
      }
}

// Negative adjoint of `gradient`.
inline void divergence(const Grid& g, const std::array<Field, 3>& p, Field& out) {
  out.assign(g.size(), 0.0);
  for (std::size_t z = 0; z < g.d; ++z)
    for (std::size_t y = 0; y < g.h; ++y)
      for (std::size_t x = 0; x < g.w; ++x) {
        const std::size_t i = g.at(z, y, x);
        double v = 0.0;
        if (z + 1 < g.d) v += p[0][i];
        if (z > 0) v -= p[0][g.at(z - 1, y, x)];
        if (y + 1 < g.h) v += p[1][i];
        if (y > 0) v -= p[1][g.at(z, y - 1, x)];
        if (x + 1 < g.w) v += p[2][i];
        if (x > 0) v -= p[2][g.at(z, y, x - 1)];
        out[i] = v;
      }
}

inline double isotropic_tv(const Grid& g, const Field& u) {
  std::array<Field, 3> gr;
  gradient(g, u, gr);
  double tv = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    tv += std::sqrt(gr[0][i] * gr[0][i] + gr[1][i] * gr[1][i] + gr[2][i] * gr[2][i]);
  return tv;
}

}  // namespace tv3d

/// Isotropic 3D TV of a volume (forward differences, unit spacing).
inline double total_variation_3d(const Volume& v) {
  const tv3d::Grid g{v.depth(), v.height(), v.width()};
  return tv3d::isotropic_tv(g, tv3d::Field(v.storage().begin(), v.storage().end()));
}

/// argmin_u 1/2 |u - f|^2 + weight * TV_iso(u), stopped at relative duality
/// gap `tol` or `max_iter` (warning logged).
inline Tv3dResult tv3d_denoise(const Volume& f_vol, const Tv3dParams& p) {
  require(std::isfinite(p.weight) && p.weight >= 0.0, "tv3d: weight must be >= 0");
  require_finite(f_vol, "tv3d input");
  Tv3dResult res;
  if (p.weight == 0.0) {
    res.u = f_vol;
    return res;
  }
  const tv3d::Grid g{f_vol.depth(), f_vol.height(), f_vol.width()};
  const tv3d::Field f(f_vol.storage().begin(), f_vol.storage().end());
  const double lambda = p.weight;
  const double tau = 1.0 / 12.0;
  std::array<tv3d::Field, 3> dual, gr;
  for (auto& c : dual) c.assign(g.size(), 0.0);
  tv3d::Field div, u(f), tmp(g.size());
  double fnorm2 = 0.0;
  for (double v : f) fnorm2 += v * v;

  auto duality_gap = [&](double& primal) {
    double fid = 0.0, un = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      fid += (u[i] - f[i]) * (u[i] - f[i]);
      un += u[i] * u[i];
    }
    primal = 0.5 * fid + lambda * tv3d::isotropic_tv(g, u);
    const double dual_val = 0.5 * fnorm2 - 0.5 * un;  // u = f - lambda div p
    return primal - dual_val;
  };

  for (std::size_t it = 1; it <= p.max_iter; ++it) {
    tv3d::divergence(g, dual, div);
    for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = div[i] - f[i] / lambda;
    tv3d::gradient(g, tmp, gr);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double nrm = std::sqrt(gr[0][i] * gr[0][i] + gr[1][i] * gr[1][i] + gr[2][i] * gr[2][i]);
      const double denom = 1.0 + tau * nrm;
      for (int c = 0; c < 3; ++c) dual[c][i] = (dual[c][i] + tau * gr[c][i]) / denom;
    }
    tv3d::divergence(g, dual, div);
    for (std::size_t i = 0; i < g.size(); ++i) u[i] = f[i] - lambda * div[i];
    res.iterations = it;
    if (it % 10 == 0 || it == p.max_iter) {
      double primal = 0.0;
      const double gap = duality_gap(primal);
      res.gap = primal > 0.0 ? gap / primal : 0.0;
      if (res.gap <= p.tol) break;
    }
  }
  if (res.gap > p.tol)
    log::warn("tv3d: relative duality gap " + std::to_string(res.gap) + " above tolerance after " +
              std::to_string(res.iterations) + " iterations");
  std::vector<float> out(u.begin(), u.end());
  res.u = Volume(f_vol.dims(), std::move(out));
  return res;
}

}  // namespace psi3d
