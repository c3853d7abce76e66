#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "psi3d/forward_model.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/volume.hpp"

namespace psi3d::testutil {

inline Plane random_plane(std::size_t h, std::size_t w, std::uint64_t seed, double scale = 1.0) {
  NormalStream n(seed, scale);
  Plane p(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  n.fill(std::span<double>(p.data(), static_cast<std::size_t>(p.size())));
  return p;
}

inline Volume random_volume(Dims d, std::uint64_t seed, double mean = 0.0, double scale = 1.0) {
  NormalStream n(seed, scale);
  Volume v(d);
  for (float& f : v.storage()) f = static_cast<float>(mean + n.next());
  return v;
}

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // unbiased
  std::size_t n = 0;
  double se() const { return std::sqrt(var / static_cast<double>(n)); }
};

inline Moments moments(const std::vector<double>& xs) {
  Moments m;
  m.n = xs.size();
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(m.n);
  for (double x : xs) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(m.n - 1);
  return m;
}

inline Eigen::VectorXd vec(const Plane& p) { return Eigen::Map<const Eigen::VectorXd>(p.data(), p.size()); }

inline Plane unvec(const Eigen::VectorXd& v, std::size_t h, std::size_t w) {
  Plane p(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  std::copy(v.data(), v.data() + v.size(), p.data());
  return p;
}

// Dense per-slice matrix of a model on row-major vec(X), by applying it to
// every basis plane.
inline Eigen::MatrixXd dense_of(const ForwardModel& m) {
  const std::size_t h = m.domain_height(), w = m.domain_width();
  const std::size_t n = h * w, r = m.range_height() * m.range_width();
  Eigen::MatrixXd a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    Plane e = Plane::Zero(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
    e.data()[j] = 1.0;
    const Plane col = m.apply(e);
    a.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(col.data(), col.size());
  }
  return a;
}

inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd k(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

}  // namespace psi3d::testutil
