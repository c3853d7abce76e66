#include <gtest/gtest.h>

#include <cmath>

#include "psi3d/forward_model.hpp"
#include "test_util.hpp"

using namespace psi3d;
using psi3d::testutil::random_plane;
using psi3d::testutil::random_volume;
using psi3d::testutil::dense_of;
using psi3d::testutil::kron;

namespace {

// Block-average matrix built directly from its definition.
Eigen::MatrixXd block_average_matrix(std::size_t n, std::size_t k) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n / k), static_cast<Eigen::Index>(n));
  for (std::size_t b = 0; b < n / k; ++b)
    for (std::size_t p = 0; p < k; ++p) a(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(b * k + p)) = 1.0 / static_cast<double>(k);
  return a;
}

std::vector<ForwardModel> all_models() {
  Eigen::MatrixXd ay = testutil::random_plane(5, 8, 11);
  Eigen::MatrixXd ax = testutil::random_plane(6, 6, 12);
  return {ForwardModel::identity(8, 6, 0.1), ForwardModel::downsample(8, 6, 2, 0.1),
          ForwardModel::downsample(8, 8, 4, 0.1), ForwardModel::downsample(8, 6, 2, 0.1, DownsampleAxes::y_only),
          ForwardModel::downsample(8, 6, 2, 0.1, DownsampleAxes::x_only), ForwardModel::decimation(8, 6, 2, 0.1),
          ForwardModel::separable(ay, ax, 0.1)};
}

}  // namespace

TEST(ForwardModel, IdentityIsIdentity) {
  const Volume v = random_volume({3, 8, 8}, 1);
  const Volume out = apply_forward(ForwardModel::identity(8, 8, 0.0), v);
  EXPECT_EQ(out.storage(), v.storage());
  EXPECT_EQ(apply_adjoint(ForwardModel::identity(8, 8, 0.0), v).storage(), v.storage());
}

TEST(ForwardModel, DownsampleOfConstantIsConstant) {
  Volume v({2, 8, 8}, 0.37f);
  const Volume out = apply_forward(ForwardModel::downsample(8, 8, 2, 0.0), v);
  EXPECT_EQ(out.dims(), (Dims{2, 4, 4}));
  for (float f : out.data()) EXPECT_NEAR(f, 0.37f, 1e-6);
}

TEST(ForwardModel, Downsample4MatchesDenseOracle) {
  const ForwardModel m = ForwardModel::downsample(8, 8, 4, 0.0);
  const Eigen::MatrixXd a1 = block_average_matrix(8, 4);
  const Plane x = random_plane(8, 8, 3);
  const Plane expected = a1 * x * a1.transpose();
  EXPECT_LT((m.apply(x) - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((dense_of(m) - kron(a1, a1)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ForwardModel, AdjointOfDeltaIsQuarterBlock) {
  const ForwardModel m = ForwardModel::downsample(8, 8, 2, 0.0);
  Plane delta = Plane::Zero(4, 4);
  delta(1, 2) = 1.0;
  const Plane at = m.adjoint(delta);
  for (Eigen::Index y = 0; y < 8; ++y)
    for (Eigen::Index x = 0; x < 8; ++x) {
      const bool inside = y / 2 == 1 && x / 2 == 2;
      EXPECT_NEAR(at(y, x), inside ? 0.25 : 0.0, 1e-15);
    }
  const Eigen::MatrixXd a = block_average_matrix(8, 2);
  const Plane oracle = a.transpose() * delta * a;
  EXPECT_LT((at - oracle).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ForwardModel, AdjointConsistencyAllKinds) {
  for (const ForwardModel& m : all_models()) {
    for (std::uint64_t s = 0; s < 100; ++s) {
      const Plane x = random_plane(m.domain_height(), m.domain_width(), 100 + s);
      const Plane y = random_plane(m.range_height(), m.range_width(), 900 + s);
      const double lhs = (m.apply(x).array() * y.array()).sum();
      const double rhs = (x.array() * m.adjoint(y).array()).sum();
      ASSERT_LE(std::abs(lhs - rhs), 1e-5 * x.norm() * y.norm());
    }
  }
}

TEST(ForwardModel, AdjointOfForwardEqualsVS2Vt) {
  for (const ForwardModel& m : all_models()) {
    const Plane s2 = m.singular_grid().array().square();
    for (std::uint64_t s = 0; s < 10; ++s) {
      const Plane x = random_plane(m.domain_height(), m.domain_width(), 40 + s);
      const Plane lhs = m.adjoint(m.apply(x));
      const Plane rhs = m.synthesis((m.analysis(x).array() * s2.array()).matrix());
      ASSERT_LE((lhs - rhs).norm(), 1e-5 * (1.0 + lhs.norm()));
    }
  }
}

TEST(ForwardModel, SvdFactorsReconstructAxisMatrices) {
  const std::vector<AxisOperator> ops = {AxisOperator::block_average(12, 3), AxisOperator::block_average(64, 4),
                                         AxisOperator::decimation(12, 2),
                                         AxisOperator::dense(random_plane(40, 64, 5)),
                                         AxisOperator::dense(random_plane(64, 64, 6))};
  for (const AxisOperator& op : ops) {
    const Eigen::MatrixXd a = op.matrix();
    const Eigen::MatrixXd u = op.left_singular(), v = op.right_singular();
    const auto m = static_cast<Eigen::Index>(op.range()), n = static_cast<Eigen::Index>(op.domain());
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(m, n);
    for (Eigen::Index i = 0; i < std::min(m, n); ++i) s(i, i) = op.singular_values()(i);
    EXPECT_LE((a - u * s * v.transpose()).norm() / a.norm(), 1e-5);
    EXPECT_LE((v.transpose() * v - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_GE(op.singular_values().minCoeff(), 0.0);
  }
}

TEST(ForwardModel, BlockAverageSpectrum) {
  const ForwardModel m = ForwardModel::downsample(8, 8, 2, 0.0);
  const Plane s = m.singular_grid();
  std::size_t nonzero = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const double v = s.data()[i];
    if (v != 0.0) {
      ++nonzero;
      EXPECT_NEAR(v, 0.5, 1e-15);
    }
  }
  EXPECT_EQ(nonzero, 16u);
  // Against a dense SVD of the same operator.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(dense_of(m));
  Eigen::VectorXd sv = svd.singularValues();
  for (Eigen::Index i = 0; i < sv.size(); ++i) EXPECT_NEAR(sv(i), 0.5, 1e-12);
}

TEST(ForwardModel, DownsampleThenNearestUpsampleIsProjection) {
  const ForwardModel m = ForwardModel::downsample(8, 8, 2, 0.0);
  const Volume v = random_volume({2, 8, 8}, 9);
  const Volume once = upsample_nearest(apply_forward(m, v), 2);
  const Volume twice = upsample_nearest(apply_forward(m, once), 2);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(once.storage()[i], twice.storage()[i], 1e-6);
}

TEST(ForwardModel, DimensionMismatchRejected) {
  const ForwardModel m = ForwardModel::downsample(8, 8, 2, 0.0);
  EXPECT_THROW(apply_forward(m, Volume({1, 6, 8})), InvalidInput);
  EXPECT_THROW(apply_adjoint(m, Volume({1, 8, 8})), InvalidInput);
  EXPECT_THROW(ForwardModel::downsample(9, 8, 2, 0.0), InvalidInput);
  EXPECT_THROW(ForwardModel::identity(4, 4, -1.0), InvalidInput);
}

TEST(ForwardModel, GeneralOperatorHasNoSvd) {
  const Eigen::MatrixXd a = random_plane(6, 16, 2);
  const ForwardModel m = ForwardModel::general(a, 4, 4, 2, 3, 0.1);
  const Plane x = random_plane(4, 4, 3);
  const Plane y = random_plane(2, 3, 4);
  EXPECT_NEAR((m.apply(x).array() * y.array()).sum(), (x.array() * m.adjoint(y).array()).sum(), 1e-10);
  EXPECT_THROW(m.analysis(x), UnsupportedOperator);
  EXPECT_THROW(m.singular_grid(), UnsupportedOperator);
}

TEST(ForwardModel, SingleAxisDownsampling) {
  const ForwardModel y_only = ForwardModel::downsample(8, 6, 2, 0.0, DownsampleAxes::y_only);
  EXPECT_EQ(y_only.range_height(), 4u);
  EXPECT_EQ(y_only.range_width(), 6u);
  const ForwardModel x_only = ForwardModel::downsample(8, 6, 2, 0.0, DownsampleAxes::x_only);
  EXPECT_EQ(x_only.range_height(), 8u);
  EXPECT_EQ(x_only.range_width(), 3u);
  EXPECT_EQ(parse_axes("y"), DownsampleAxes::y_only);
  EXPECT_EQ(to_string(DownsampleAxes::both), "yx");
  EXPECT_THROW(parse_axes("z"), InvalidInput);
}

TEST(Degrade, ZeroSigmaEqualsForward) {
  const ForwardModel m = ForwardModel::downsample(8, 8, 2, 0.0);
  const Volume v = random_volume({3, 8, 8}, 4);
  EXPECT_EQ(degrade(m, v, 1).storage(), apply_forward(m, v).storage());
}

TEST(Degrade, DeterministicGivenSeed) {
  const ForwardModel m = ForwardModel::downsample(8, 8, 2, 0.1);
  const Volume v = random_volume({3, 8, 8}, 4);
  EXPECT_EQ(degrade(m, v, 17).storage(), degrade(m, v, 17).storage());
  EXPECT_NE(degrade(m, v, 17).storage(), degrade(m, v, 18).storage());
}

TEST(Degrade, NoiseStandardDeviation) {
  const ForwardModel m = ForwardModel::identity(100, 100, 0.1);
  const Volume v({100, 100, 100}, 0.5f);
  const Volume d = degrade(m, v, 5);
  double acc = 0.0, acc2 = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double e = static_cast<double>(d.storage()[i]) - 0.5;
    acc += e;
    acc2 += e * e;
  }
  const double n = static_cast<double>(d.size());
  const double sd = std::sqrt((acc2 - acc * acc / n) / (n - 1));
  EXPECT_NEAR(sd, 0.1, 0.001);
}
