#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "psi3d/errors.hpp"

namespace psi3d {

/// Row-major (y, x) plane used for per-slice linear algebra.
using Plane = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dims {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  constexpr std::size_t slice_size() const noexcept { return height * width; }
  constexpr std::size_t size() const noexcept { return depth * height * width; }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;

  std::string str() const {
    return std::to_string(depth) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
};

/// One axial slice in double precision. `index` is the z position in the
/// parent volume (0 when detached).
struct Slice {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t index = 0;
  std::vector<double> values;

  Slice() = default;
  Slice(std::size_t h, std::size_t w, std::size_t idx = 0, double fill = 0.0)
      : height(h), width(w), index(idx), values(h * w, fill) {}

  std::size_t size() const noexcept { return values.size(); }
  double& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }

  Eigen::Map<const Plane> plane() const {
    return {values.data(), static_cast<Eigen::Index>(height), static_cast<Eigen::Index>(width)};
  }
  Eigen::Map<Plane> plane() {
    return {values.data(), static_cast<Eigen::Index>(height), static_cast<Eigen::Index>(width)};
  }

  static Slice from_plane(const Plane& p, std::size_t idx = 0) {
    Slice s(static_cast<std::size_t>(p.rows()), static_cast<std::size_t>(p.cols()), idx);
    s.plane() = p;
    return s;
  }
};

/// Dense 3D scalar field, 32-bit floats in (z, y, x) C order. z is the slice
/// concatenation axis.
class Volume {
 public:
  Volume() = default;
  explicit Volume(Dims dims, float fill = 0.0f) : dims_(dims), data_(dims.size(), fill) {}
  Volume(Dims dims, std::vector<float> data) : dims_(dims), data_(std::move(data)) {
    require(data_.size() == dims_.size(), "volume data length " + std::to_string(data_.size()) +
                                              " does not match dims " + dims_.str());
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t depth() const noexcept { return dims_.depth; }
  std::size_t height() const noexcept { return dims_.height; }
  std::size_t width() const noexcept { return dims_.width; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator()(std::size_t z, std::size_t y, std::size_t x) { return data_[offset(z, y, x)]; }
  float operator()(std::size_t z, std::size_t y, std::size_t x) const { return data_[offset(z, y, x)]; }

  std::span<float> slice_span(std::size_t z) {
    return std::span<float>(data_).subspan(z * dims_.slice_size(), dims_.slice_size());
  }
  std::span<const float> slice_span(std::size_t z) const {
    return std::span<const float>(data_).subspan(z * dims_.slice_size(), dims_.slice_size());
  }

  Slice slice(std::size_t z) const {
    require(z < dims_.depth, "slice index out of range");
    Slice s(dims_.height, dims_.width, z);
    auto src = slice_span(z);
    std::copy(src.begin(), src.end(), s.values.begin());
    return s;
  }

  Plane plane(std::size_t z) const {
    Plane p(dims_.height, dims_.width);
    auto src = slice_span(z);
    std::copy(src.begin(), src.end(), p.data());
    return p;
  }

  void set_slice(std::size_t z, std::span<const double> values) {
    require(z < dims_.depth, "slice index out of range");
    require(values.size() == dims_.slice_size(), "slice size mismatch");
    auto dst = slice_span(z);
    std::transform(values.begin(), values.end(), dst.begin(), [](double v) { return static_cast<float>(v); });
  }
  void set_slice(const Slice& s) {
    require(s.height == dims_.height && s.width == dims_.width, "slice dims do not match volume");
    set_slice(s.index, s.values);
  }
  void set_plane(std::size_t z, const Plane& p) {
    require(static_cast<std::size_t>(p.rows()) == dims_.height && static_cast<std::size_t>(p.cols()) == dims_.width,
            "plane dims do not match volume");
    set_slice(z, std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
  }

  /// Copy of slices [first, first + count).
  Volume sub_depth(std::size_t first, std::size_t count) const {
    require(first + count <= dims_.depth, "sub-volume out of range");
    Volume out(Dims{count, dims_.height, dims_.width});
    auto begin = data_.begin() + static_cast<std::ptrdiff_t>(first * dims_.slice_size());
    std::copy(begin, begin + static_cast<std::ptrdiff_t>(count * dims_.slice_size()), out.data_.begin());
    return out;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

 private:
  std::size_t offset(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return (z * dims_.height + y) * dims_.width + x;
  }

  Dims dims_;
  std::vector<float> data_;
};

inline void require_finite(const Volume& v, const std::string& what) {
  if (!v.all_finite()) throw InvalidInput(what + " contains non-finite values");
}

inline void require_same_dims(const Volume& a, const Volume& b, const std::string& what) {
  if (a.dims() != b.dims())
    throw InvalidInput(what + ": dimension mismatch " + a.dims().str() + " vs " + b.dims().str());
}

inline bool all_finite(std::span<const double> values) noexcept {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace psi3d
