#pragma once

// Reconstruction quality and uncertainty metrics.
//
// SSIM uses the usual defaults (11x11 Gaussian window, sigma 1.5, K1 = 0.01,
// K2 = 0.03) over the 'valid' region of each 2D slice; volume SSIM is the
// mean over slices. MS-SSIM uses 5 scales with 2x2 average pooling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "psi3d/errors.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/volume.hpp"

namespace psi3d {

inline double psnr_from_mse(double mse, double peak) {
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

/// 10 log10(peak^2 / MSE); identical inputs give +inf.
inline double psnr(const Volume& ref, const Volume& test, double peak) {
  require_same_dims(ref, test, "psnr");
  require(peak > 0.0 && std::isfinite(peak), "psnr: peak must be > 0");
  require(ref.size() > 0, "psnr: empty volume");
  double acc = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = static_cast<double>(ref.storage()[i]) - static_cast<double>(test.storage()[i]);
    acc += d * d;
  }
  return psnr_from_mse(acc / static_cast<double>(ref.size()), peak);
}

inline std::vector<double> psnr_per_slice(const Volume& ref, const Volume& test, double peak) {
  require_same_dims(ref, test, "psnr");
  std::vector<double> out(ref.depth());
  for (std::size_t z = 0; z < ref.depth(); ++z)
    out[z] = psnr_from_mse((ref.plane(z) - test.plane(z)).squaredNorm() / static_cast<double>(ref.dims().slice_size()),
                           peak);
  return out;
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

namespace detail {

inline std::vector<double> gaussian_taps(std::size_t n, double sigma) {
  std::vector<double> g(n);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - c;
    sum += g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  for (double& v : g) v /= sum;
  return g;
}

// Separable 'valid' filtering.
inline Plane filter_valid(const Plane& x, const std::vector<double>& g) {
  const auto n = static_cast<Eigen::Index>(g.size());
  const Eigen::Index oh = x.rows() - n + 1, ow = x.cols() - n + 1;
  Plane rows(x.rows(), ow);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (Eigen::Index t = 0; t < n; ++t) acc += g[t] * x(i, j + t);
      rows(i, j) = acc;
    }
  Plane out(oh, ow);
  for (Eigen::Index i = 0; i < oh; ++i)
    for (Eigen::Index j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (Eigen::Index t = 0; t < n; ++t) acc += g[t] * rows(i + t, j);
      out(i, j) = acc;
    }
  return out;
}

struct SsimTerms {
  double ssim = 0.0;
  double cs = 0.0;  // contrast-structure term
};

inline SsimTerms ssim_terms(const Plane& a, const Plane& b, const SsimParams& p) {
  if (a.rows() < static_cast<Eigen::Index>(p.window) || a.cols() < static_cast<Eigen::Index>(p.window))
    throw InvalidInput("ssim: slice " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                       " is smaller than the " + std::to_string(p.window) + "x" + std::to_string(p.window) + " window");
  const auto g = gaussian_taps(p.window, p.sigma);
  const double c1 = std::pow(p.k1 * p.data_range, 2), c2 = std::pow(p.k2 * p.data_range, 2);
  const Plane mu_a = filter_valid(a, g), mu_b = filter_valid(b, g);
  const Plane saa = filter_valid(a.cwiseProduct(a), g) - mu_a.cwiseProduct(mu_a);
  const Plane sbb = filter_valid(b.cwiseProduct(b), g) - mu_b.cwiseProduct(mu_b);
  const Plane sab = filter_valid(a.cwiseProduct(b), g) - mu_a.cwiseProduct(mu_b);
  double ssim = 0.0, cs = 0.0;
  for (Eigen::Index i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a.data()[i], mb = mu_b.data()[i];
    const double csv = (2.0 * sab.data()[i] + c2) / (saa.data()[i] + sbb.data()[i] + c2);
    const double lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    ssim += lum * csv;
    cs += csv;
  }
  const auto n = static_cast<double>(mu_a.size());
  return {ssim / n, cs / n};
}

inline Plane pool2(const Plane& x) {
  const Eigen::Index h = x.rows() / 2, w = x.cols() / 2;
  Plane out(h, w);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j)
      out(i, j) = 0.25 * (x(2 * i, 2 * j) + x(2 * i + 1, 2 * j) + x(2 * i, 2 * j + 1) + x(2 * i + 1, 2 * j + 1));
  return out;
}

}  // namespace detail

inline double ssim_slice(const Plane& a, const Plane& b, const SsimParams& p = {}) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "ssim: slice dims differ");
  return detail::ssim_terms(a, b, p).ssim;
}

inline std::vector<double> ssim_per_slice(const Volume& ref, const Volume& test, const SsimParams& p = {}) {
  require_same_dims(ref, test, "ssim");
  std::vector<double> out(ref.depth());
  for (std::size_t z = 0; z < ref.depth(); ++z) out[z] = ssim_slice(ref.plane(z), test.plane(z), p);
  return out;
}

inline double ssim(const Volume& ref, const Volume& test, const SsimParams& p = {}) {
  const auto v = ssim_per_slice(ref, test, p);
  double acc = 0.0;
  for (double s : v) acc += s;
  return acc / static_cast<double>(v.size());
}

inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Smallest slice side MS-SSIM accepts with window size `window`.
inline std::size_t ms_ssim_min_side(std::size_t window = 11) { return window << (kMsSsimWeights.size() - 1); }

inline double ms_ssim_slice(Plane a, Plane b, const SsimParams& p = {}) {
  const std::size_t need = ms_ssim_min_side(p.window);
  if (static_cast<std::size_t>(std::min(a.rows(), a.cols())) < need)
    throw InvalidInput("ms_ssim: slice " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                       " too small for 5 scales (need " + std::to_string(need) + " per side)");
  double out = 1.0;
  for (std::size_t s = 0; s < kMsSsimWeights.size(); ++s) {
    const auto t = detail::ssim_terms(a, b, p);
    const bool last = s + 1 == kMsSsimWeights.size();
    const double v = std::max(last ? t.ssim : t.cs, 0.0);
    out *= std::pow(v, kMsSsimWeights[s]);
    if (!last) {
      a = detail::pool2(a);
      b = detail::pool2(b);
    }
  }
  return out;
}

inline double ms_ssim(const Volume& ref, const Volume& test, const SsimParams& p = {}) {
  require_same_dims(ref, test, "ms_ssim");
  double acc = 0.0;
  for (std::size_t z = 0; z < ref.depth(); ++z) acc += ms_ssim_slice(ref.plane(z), test.plane(z), p);
  return acc / static_cast<double>(ref.depth());
}

inline constexpr double kSdFloor = 1e-12;

/// Fraction of voxels with |truth - mean| <= k sd. With subsample > 0 only
/// that many voxels, drawn with replacement from `seed`, are tested.
inline double credible_coverage(const Volume& truth, const Volume& mean, const Volume& sd, double k,
                                std::size_t subsample = 0, std::uint64_t seed = 0) {
  require_same_dims(truth, mean, "coverage");
  require_same_dims(truth, sd, "coverage");
  require(k >= 0.0 && std::isfinite(k), "coverage: k must be >= 0");
  require(truth.size() > 0, "coverage: empty volume");
  auto hit = [&](std::size_t i) {
    const double s = std::max(static_cast<double>(sd.storage()[i]), kSdFloor);
    return std::abs(static_cast<double>(truth.storage()[i]) - mean.storage()[i]) <= k * s;
  };
  std::size_t inside = 0;
  if (subsample == 0) {
    for (std::size_t i = 0; i < truth.size(); ++i) inside += hit(i);
    return static_cast<double>(inside) / static_cast<double>(truth.size());
  }
  SplitMix64 bits(derive_seed(seed, StreamTag::subsample, {}));
  for (std::size_t n = 0; n < subsample; ++n) inside += hit(bits() % truth.size());
  return static_cast<double>(inside) / static_cast<double>(subsample);
}

/// Mean over voxels of log(2 pi sd^2)/2 + (truth - mean)^2 / (2 sd^2).
inline double gaussian_nll(const Volume& truth, const Volume& mean, const Volume& sd) {
  require_same_dims(truth, mean, "nll");
  require_same_dims(truth, sd, "nll");
  require(truth.size() > 0, "nll: empty volume");
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double s = std::max(static_cast<double>(sd.storage()[i]), kSdFloor);
    const double d = static_cast<double>(truth.storage()[i]) - mean.storage()[i];
    acc += 0.5 * std::log(2.0 * std::numbers::pi * s * s) + d * d / (2.0 * s * s);
  }
  return acc / static_cast<double>(truth.size());
}

struct MetricReport {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> ms_ssim;  ///< unset when the slices are too small
  std::optional<double> coverage_3sd;
  std::optional<double> nll;
  std::vector<double> psnr_slices;
  std::vector<double> ssim_slices;
  std::string ssim_convention = "per-slice 2D SSIM averaged over z";

  nlohmann::json to_json() const {
    auto num = [](double v) -> nlohmann::json {
      if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
      if (std::isnan(v)) return nullptr;
      return v;
    };
    nlohmann::json j;
    j["name"] = name;
    j["psnr"] = num(psnr);
    j["ssim"] = num(ssim);
    j["ms_ssim"] = ms_ssim ? num(*ms_ssim) : nlohmann::json("not computed: slices too small");
    j["lpips"] = "not computed";
    if (coverage_3sd) j["coverage_3sd"] = *coverage_3sd;
    if (nll) j["nll"] = *nll;
    j["ssim_convention"] = ssim_convention;
    nlohmann::json ps = nlohmann::json::array(), ss = nlohmann::json::array();
    for (double v : psnr_slices) ps.push_back(num(v));
    for (double v : ssim_slices) ss.push_back(v);
    j["per_slice"] = {{"psnr", ps}, {"ssim", ss}};
    return j;
  }

  static std::string csv_header() { return "name,psnr,ssim,ms_ssim,lpips,coverage_3sd,nll"; }

  std::string csv_row() const {
    std::ostringstream os;
    os.precision(10);
    auto opt = [&](const std::optional<double>& v) {
      if (v) os << *v;
    };
    os << name << ',' << psnr << ',' << ssim << ',';
    opt(ms_ssim);
    os << ",,";
    opt(coverage_3sd);
    os << ',';
    opt(nll);
    return os.str();
  }
};

/// Full report; coverage and NLL need an SD volume.
inline MetricReport evaluate(const std::string& name, const Volume& ref, const Volume& test, double peak,
                             const Volume* sd = nullptr) {
  MetricReport r;
  r.name = name;
  r.psnr = psnr(ref, test, peak);
  SsimParams sp;
  sp.data_range = peak;
  r.psnr_slices = psnr_per_slice(ref, test, peak);
  r.ssim_slices = ssim_per_slice(ref, test, sp);
  double acc = 0.0;
  for (double v : r.ssim_slices) acc += v;
  r.ssim = acc / static_cast<double>(r.ssim_slices.size());
  if (std::min(ref.height(), ref.width()) >= ms_ssim_min_side(sp.window)) r.ms_ssim = ms_ssim(ref, test, sp);
  if (sd) {
    r.coverage_3sd = credible_coverage(ref, test, *sd, 3.0);
    r.nll = gaussian_nll(ref, test, *sd);
  }
  return r;
}

}  // namespace psi3d
