#include <gtest/gtest.h>

#include <set>

#include "psi3d/rng.hpp"
#include "test_util.hpp"

using namespace psi3d;

TEST(Rng, SplitMixMatchesReferenceValues) {
  // First outputs of the reference splitmix64 for seed 0.
  SplitMix64 g(0);
  EXPECT_EQ(g(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(g(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(g(), 0x06C45D188009454FULL);
}

TEST(Rng, UniformInUnitInterval) {
  SplitMix64 g(42);
  for (int i = 0; i < 10000; ++i) {
    const double u = g.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, NormalMoments) {
  NormalStream n(7);
  std::vector<double> xs(200000);
  for (double& x : xs) x = n.next();
  const auto m = testutil::moments(xs);
  EXPECT_NEAR(m.mean, 0.0, 4.0 * m.se());
  EXPECT_NEAR(m.var, 1.0, 0.02);
}

TEST(Rng, SameSeedSameStream) {
  NormalStream a(99), b(99);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next(), b.next());
}

TEST(Rng, SilentAndAntitheticStreams) {
  NormalStream base(5), anti(5, -1.0), zero = NormalStream::silent(5);
  for (int i = 0; i < 100; ++i) {
    const double v = base.next();
    EXPECT_EQ(anti.next(), -v);
    EXPECT_EQ(zero.next(), 0.0);
  }
}

TEST(Rng, DerivedSeedsAreDistinct) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t t = 0; t < 50; ++t)
    for (std::uint64_t s = 0; s < 50; ++s) seen.insert(derive_seed(1, StreamTag::likelihood, {t, s}));
  EXPECT_EQ(seen.size(), 2500u);
  EXPECT_NE(derive_seed(1, StreamTag::likelihood, {0}), derive_seed(1, StreamTag::prior, {0}));
  EXPECT_NE(derive_seed(1, StreamTag::likelihood, {0, 1}), derive_seed(1, StreamTag::likelihood, {1, 0}));
  EXPECT_EQ(derive_seed(3, StreamTag::tv, {4, 5}), derive_seed(3, StreamTag::tv, {4, 5}));
}
