#pragma once

// Slice-separable linear forward operators with explicit SVD factors.
//
// A per-slice operator acts on an H x W plane X as A_y X A_x^T, where each axis
// factor has a full SVD A = U S V^T with V square and S zero padded to the
// domain length. Spectral coordinates of a plane are C = V_y^T X V_x; the
// singular value of mode (i, j) is s_y[i] * s_x[j].

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "psi3d/errors.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/volume.hpp"

namespace psi3d {

enum class AxisKind { identity, block_average, dense };

/// Which side of an axis factor to apply.
enum class AxisMap {
  forward,    ///< A
  adjoint,    ///< A^T
  analysis,   ///< V^T (domain -> spectral)
  synthesis,  ///< V   (spectral -> domain)
};

/// One-dimensional linear map R^n -> R^m with its full SVD.
class AxisOperator {
 public:
  static AxisOperator identity(std::size_t n) {
    AxisOperator op;
    op.kind_ = AxisKind::identity;
    op.n_ = op.m_ = n;
    op.s_ = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
    return op;
  }

  /// Average of k consecutive samples. Rows are orthogonal with norm 1/sqrt(k),
  /// so U = I, s = 1/sqrt(k) on the m block modes and V is block diagonal with a
  /// Helmert tile whose first column is the normalized constant.
  static AxisOperator block_average(std::size_t n, std::size_t k) {
    require(k >= 1, "downsample factor must be >= 1");
    require(n % k == 0, "axis length " + std::to_string(n) + " is not divisible by factor " + std::to_string(k));
    if (k == 1) return identity(n);
    AxisOperator op;
    op.kind_ = AxisKind::block_average;
    op.n_ = n;
    op.m_ = n / k;
    op.block_ = k;
    op.s_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    op.s_.head(static_cast<Eigen::Index>(op.m_)).setConstant(1.0 / std::sqrt(static_cast<double>(k)));
    op.tile_ = helmert(k);
    return op;
  }

  /// Keep every k-th sample. Backed by a dense SVD.
  static AxisOperator decimation(std::size_t n, std::size_t k) {
    require(k >= 1 && n % k == 0, "decimation factor must divide the axis length");
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n / k), static_cast<Eigen::Index>(n));
    for (std::size_t b = 0; b < n / k; ++b) a(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(b * k)) = 1.0;
    return dense(std::move(a));
  }

  static AxisOperator dense(Eigen::MatrixXd a) {
    require(a.rows() > 0 && a.cols() > 0, "empty axis matrix");
    require(a.allFinite(), "axis matrix contains non-finite entries");
    AxisOperator op;
    op.kind_ = AxisKind::dense;
    op.m_ = static_cast<std::size_t>(a.rows());
    op.n_ = static_cast<std::size_t>(a.cols());
    Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    op.u_ = svd.matrixU();
    op.v_ = svd.matrixV();
    op.s_ = Eigen::VectorXd::Zero(a.cols());
    op.s_.head(svd.singularValues().size()) = svd.singularValues();
    op.a_ = std::move(a);
    return op;
  }

  AxisKind kind() const noexcept { return kind_; }
  std::size_t domain() const noexcept { return n_; }
  std::size_t range() const noexcept { return m_; }
  std::size_t block() const noexcept { return block_; }

  /// Singular values, length domain(), zero padded past min(m, n).
  const Eigen::VectorXd& singular_values() const noexcept { return s_; }

  Eigen::MatrixXd matrix() const {
    if (kind_ == AxisKind::dense) return a_;
    return apply_left(AxisMap::forward, Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(n_)));
  }
  Eigen::MatrixXd left_singular() const {
    if (kind_ == AxisKind::dense) return u_;
    return Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(m_), static_cast<Eigen::Index>(m_));
  }
  Eigen::MatrixXd right_singular() const {
    if (kind_ == AxisKind::dense) return v_;
    return apply_left(AxisMap::synthesis, Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(n_)));
  }

  /// op * x, where op is selected by `map` and acts on the rows of x.
  template <class Derived>
  Eigen::MatrixXd apply_left(AxisMap map, const Eigen::MatrixBase<Derived>& x) const {
    const auto in_rows = static_cast<std::size_t>(x.rows());
    const std::size_t expected = map == AxisMap::adjoint ? m_ : n_;
    require(in_rows == expected, "axis operator expected " + std::to_string(expected) + " rows, got " +
                                     std::to_string(in_rows));
    switch (kind_) {
      case AxisKind::identity:
        return x;
      case AxisKind::dense:
        switch (map) {
          case AxisMap::forward: return a_ * x;
          case AxisMap::adjoint: return a_.transpose() * x;
          case AxisMap::analysis: return v_.transpose() * x;
          case AxisMap::synthesis: return v_ * x;
        }
        break;
      case AxisKind::block_average:
        return apply_block(map, x);
    }
    throw std::logic_error("unreachable axis kind");
  }

 private:
  static Eigen::MatrixXd helmert(std::size_t k) {
    const auto kk = static_cast<Eigen::Index>(k);
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(kk, kk);
    t.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(k)));
    for (Eigen::Index q = 1; q < kk; ++q) {
      const double norm = std::sqrt(static_cast<double>(q * (q + 1)));
      for (Eigen::Index p = 0; p < q; ++p) t(p, q) = 1.0 / norm;
      t(q, q) = -static_cast<double>(q) / norm;
    }
    return t;
  }

  // Spectral row index of (block b, tile mode q) is q * m + b, so the first m
  // rows are the range modes.
  template <class Derived>
  Eigen::MatrixXd apply_block(AxisMap map, const Eigen::MatrixBase<Derived>& x) const {
    const auto k = static_cast<Eigen::Index>(block_);
    const auto m = static_cast<Eigen::Index>(m_);
    const auto cols = x.cols();
    const double inv_k = 1.0 / static_cast<double>(block_);
    Eigen::MatrixXd out;
    switch (map) {
      case AxisMap::forward:
        out.resize(m, cols);
        for (Eigen::Index b = 0; b < m; ++b) out.row(b) = x.middleRows(b * k, k).colwise().sum() * inv_k;
        break;
      case AxisMap::adjoint:
        out.resize(m * k, cols);
        for (Eigen::Index b = 0; b < m; ++b)
          for (Eigen::Index p = 0; p < k; ++p) out.row(b * k + p) = x.row(b) * inv_k;
        break;
      case AxisMap::analysis:
        out.setZero(m * k, cols);
        for (Eigen::Index b = 0; b < m; ++b)
          for (Eigen::Index q = 0; q < k; ++q)
            for (Eigen::Index p = 0; p < k; ++p) out.row(q * m + b) += tile_(p, q) * x.row(b * k + p);
        break;
      case AxisMap::synthesis:
        out.setZero(m * k, cols);
        for (Eigen::Index b = 0; b < m; ++b)
          for (Eigen::Index p = 0; p < k; ++p)
            for (Eigen::Index q = 0; q < k; ++q) out.row(b * k + p) += tile_(p, q) * x.row(q * m + b);
        break;
    }
    return out;
  }

  AxisKind kind_ = AxisKind::identity;
  std::size_t n_ = 0;
  std::size_t m_ = 0;
  std::size_t block_ = 1;
  Eigen::VectorXd s_;
  Eigen::MatrixXd tile_;
  Eigen::MatrixXd a_, u_, v_;
};

enum class ModelKind { identity, downsample, separable, general };

/// In-slice axes a downsampling operator acts on.
enum class DownsampleAxes { both, y_only, x_only };

inline std::string to_string(DownsampleAxes axes) {
  switch (axes) {
    case DownsampleAxes::both: return "yx";
    case DownsampleAxes::y_only: return "y";
    case DownsampleAxes::x_only: return "x";
  }
  return "yx";
}

inline DownsampleAxes parse_axes(const std::string& s) {
  if (s == "yx" || s == "xy" || s == "both") return DownsampleAxes::both;
  if (s == "y") return DownsampleAxes::y_only;
  if (s == "x") return DownsampleAxes::x_only;
  throw InvalidInput("unknown downsample axes '" + s + "' (expected yx, y or x)");
}

/// Linear forward model y = A x + e applied slice by slice, noise SD sigma.
class ForwardModel {
 public:
  static ForwardModel identity(std::size_t height, std::size_t width, double sigma) {
    return ForwardModel(ModelKind::identity, AxisOperator::identity(height), AxisOperator::identity(width), sigma);
  }

  /// Block-average downsampling by `factor` along the selected in-slice axes.
  static ForwardModel downsample(std::size_t height, std::size_t width, std::size_t factor, double sigma,
                                 DownsampleAxes axes = DownsampleAxes::both) {
    const bool on_y = axes != DownsampleAxes::x_only;
    const bool on_x = axes != DownsampleAxes::y_only;
    ForwardModel m(ModelKind::downsample,
                   on_y ? AxisOperator::block_average(height, factor) : AxisOperator::identity(height),
                   on_x ? AxisOperator::block_average(width, factor) : AxisOperator::identity(width), sigma);
    m.factor_ = factor;
    m.axes_ = axes;
    return m;
  }

  /// Decimation (keep every k-th sample). Alternative to block averaging; uses
  /// dense axis SVDs.
  static ForwardModel decimation(std::size_t height, std::size_t width, std::size_t factor, double sigma,
                                 DownsampleAxes axes = DownsampleAxes::both) {
    const bool on_y = axes != DownsampleAxes::x_only;
    const bool on_x = axes != DownsampleAxes::y_only;
    ForwardModel m(ModelKind::separable,
                   on_y ? AxisOperator::decimation(height, factor) : AxisOperator::identity(height),
                   on_x ? AxisOperator::decimation(width, factor) : AxisOperator::identity(width), sigma);
    m.factor_ = factor;
    m.axes_ = axes;
    return m;
  }

  /// Per-slice operator X -> A_y X A_x^T.
  static ForwardModel separable(Eigen::MatrixXd a_y, Eigen::MatrixXd a_x, double sigma) {
    return ForwardModel(ModelKind::separable, AxisOperator::dense(std::move(a_y)), AxisOperator::dense(std::move(a_x)),
                        sigma);
  }

  /// Arbitrary dense per-slice operator acting on row-major vec(X). Supports
  /// apply/adjoint only; it has no SVD route for the exact likelihood sampler.
  static ForwardModel general(Eigen::MatrixXd a, std::size_t height, std::size_t width, std::size_t range_height,
                              std::size_t range_width, double sigma) {
    require(static_cast<std::size_t>(a.cols()) == height * width, "general operator column count mismatch");
    require(static_cast<std::size_t>(a.rows()) == range_height * range_width, "general operator row count mismatch");
    ForwardModel m(ModelKind::general, AxisOperator::identity(height), AxisOperator::identity(width), sigma);
    m.general_ = std::move(a);
    m.range_h_ = range_height;
    m.range_w_ = range_width;
    return m;
  }

  ModelKind kind() const noexcept { return kind_; }
  bool has_svd() const noexcept { return kind_ != ModelKind::general; }
  double noise_sigma() const noexcept { return sigma_; }
  void set_noise_sigma(double sigma) {
    require(sigma >= 0.0 && std::isfinite(sigma), "noise sigma must be finite and >= 0");
    sigma_ = sigma;
  }
  std::size_t factor() const noexcept { return factor_; }
  DownsampleAxes axes() const noexcept { return axes_; }

  std::size_t domain_height() const noexcept { return rows_.domain(); }
  std::size_t domain_width() const noexcept { return cols_.domain(); }
  std::size_t range_height() const noexcept { return kind_ == ModelKind::general ? range_h_ : rows_.range(); }
  std::size_t range_width() const noexcept { return kind_ == ModelKind::general ? range_w_ : cols_.range(); }

  Dims range_dims(std::size_t depth) const { return {depth, range_height(), range_width()}; }
  Dims domain_dims(std::size_t depth) const { return {depth, domain_height(), domain_width()}; }

  const AxisOperator& rows() const noexcept { return rows_; }
  const AxisOperator& cols() const noexcept { return cols_; }

  Plane apply(const Plane& x) const {
    check_plane(x, domain_height(), domain_width(), "forward input");
    if (kind_ == ModelKind::general) return apply_general(general_, x, range_h_, range_w_);
    return both(AxisMap::forward, x);
  }
  Plane adjoint(const Plane& y) const {
    check_plane(y, range_height(), range_width(), "adjoint input");
    if (kind_ == ModelKind::general) return apply_general(general_.transpose(), y, domain_height(), domain_width());
    return both(AxisMap::adjoint, y);
  }
  /// V^T x in spectral coordinates.
  Plane analysis(const Plane& x) const {
    require_svd();
    check_plane(x, domain_height(), domain_width(), "analysis input");
    return both(AxisMap::analysis, x);
  }
  /// V c back to the slice domain.
  Plane synthesis(const Plane& c) const {
    require_svd();
    check_plane(c, domain_height(), domain_width(), "synthesis input");
    return both(AxisMap::synthesis, c);
  }
  /// Singular value of every spectral mode, H x W.
  Plane singular_grid() const {
    require_svd();
    return rows_.singular_values() * cols_.singular_values().transpose();
  }

  void require_svd() const {
    if (!has_svd())
      throw UnsupportedOperator(
          "forward operator has no SVD factorization; a gradient-based likelihood sampler would be required");
  }

 private:
  ForwardModel(ModelKind kind, AxisOperator rows, AxisOperator cols, double sigma)
      : kind_(kind), rows_(std::move(rows)), cols_(std::move(cols)) {
    set_noise_sigma(sigma);
  }

  static void check_plane(const Plane& p, std::size_t h, std::size_t w, const char* what) {
    if (static_cast<std::size_t>(p.rows()) != h || static_cast<std::size_t>(p.cols()) != w)
      throw InvalidInput(std::string(what) + ": expected " + std::to_string(h) + "x" + std::to_string(w) + ", got " +
                         std::to_string(p.rows()) + "x" + std::to_string(p.cols()));
  }

  Plane both(AxisMap map, const Plane& x) const {
    Eigen::MatrixXd t = rows_.apply_left(map, x);
    Eigen::MatrixXd u = cols_.apply_left(map, t.transpose());
    return u.transpose();
  }

  template <class Mat>
  static Plane apply_general(const Mat& a, const Plane& x, std::size_t h, std::size_t w) {
    Eigen::Map<const Eigen::VectorXd> v(x.data(), x.size());
    Eigen::VectorXd out = a * v;
    Plane p(h, w);
    std::copy(out.data(), out.data() + out.size(), p.data());
    return p;
  }

  ModelKind kind_;
  AxisOperator rows_;
  AxisOperator cols_;
  double sigma_ = 0.0;
  std::size_t factor_ = 1;
  DownsampleAxes axes_ = DownsampleAxes::both;
  Eigen::MatrixXd general_;
  std::size_t range_h_ = 0;
  std::size_t range_w_ = 0;
};

/// A x, slice by slice.
inline Volume apply_forward(const ForwardModel& model, const Volume& vol) {
  if (vol.height() != model.domain_height() || vol.width() != model.domain_width())
    throw InvalidInput("apply_forward: volume " + vol.dims().str() + " incompatible with model domain " +
                       model.domain_dims(vol.depth()).str());
  Volume out(model.range_dims(vol.depth()));
  for (std::size_t z = 0; z < vol.depth(); ++z) out.set_plane(z, model.apply(vol.plane(z)));
  return out;
}

/// A^T y, slice by slice.
inline Volume apply_adjoint(const ForwardModel& model, const Volume& meas) {
  if (meas.height() != model.range_height() || meas.width() != model.range_width())
    throw InvalidInput("apply_adjoint: measurement " + meas.dims().str() + " incompatible with model range " +
                       model.range_dims(meas.depth()).str());
  Volume out(model.domain_dims(meas.depth()));
  for (std::size_t z = 0; z < meas.depth(); ++z) out.set_plane(z, model.adjoint(meas.plane(z)));
  return out;
}

/// A x + e with e ~ N(0, sigma^2 I); noise for slice z comes from the
/// (seed, degrade, z) substream.
inline Volume degrade(const ForwardModel& model, const Volume& vol, std::uint64_t seed) {
  Volume clean = apply_forward(model, vol);
  const double sigma = model.noise_sigma();
  if (sigma == 0.0) return clean;
  Volume out(clean.dims());
  for (std::size_t z = 0; z < clean.depth(); ++z) {
    NormalStream noise(derive_seed(seed, StreamTag::degrade, {z}), sigma);
    auto src = clean.slice_span(z);
    auto dst = out.slice_span(z);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(static_cast<double>(src[i]) + noise.next());
  }
  return out;
}

/// Nearest-neighbour upsampling along the selected in-slice axes.
inline Volume upsample_nearest(const Volume& vol, std::size_t factor, DownsampleAxes axes = DownsampleAxes::both) {
  require(factor >= 1, "upsample factor must be >= 1");
  const std::size_t fy = axes != DownsampleAxes::x_only ? factor : 1;
  const std::size_t fx = axes != DownsampleAxes::y_only ? factor : 1;
  Volume out(Dims{vol.depth(), vol.height() * fy, vol.width() * fx});
  for (std::size_t z = 0; z < out.depth(); ++z)
    for (std::size_t y = 0; y < out.height(); ++y)
      for (std::size_t x = 0; x < out.width(); ++x) out(z, y, x) = vol(z, y / fy, x / fx);
  return out;
}

}  // namespace psi3d
