#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "psi3d/io.hpp"
#include "psi3d/rng.hpp"

using namespace psi3d;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("psi3d_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

// Random finite floats, drawn as raw bit patterns so every exponent
// (subnormals included) shows up.
Volume random_bits_volume(Dims d, std::uint64_t seed) {
  SplitMix64 bits(seed);
  Volume v(d);
  for (float& f : v.storage()) {
    do {
      f = std::bit_cast<float>(static_cast<std::uint32_t>(bits()));
    } while (!std::isfinite(f));
  }
  return v;
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(VolumeFile, RoundTripIsBitExact) {
  TempDir dir;
  Volume v = random_bits_volume({3, 17, 9}, 1);
  v.storage()[0] = std::numeric_limits<float>::denorm_min();
  v.storage()[1] = -std::numeric_limits<float>::denorm_min();
  v.storage()[2] = std::numeric_limits<float>::max();
  v.storage()[3] = -0.0f;
  const std::string p = dir.file("vol.f32");
  io::VolumeMeta meta;
  meta.peak = 2.5;
  meta.provenance = {{"seed", 7}};
  io::write_volume(p, v, meta);
  io::VolumeMeta back;
  const Volume r = io::read_volume(p, &back);
  ASSERT_EQ(r.dims(), v.dims());
  EXPECT_EQ(std::memcmp(r.storage().data(), v.storage().data(), v.size() * 4), 0);
  EXPECT_EQ(back.peak, 2.5);
  EXPECT_EQ(back.provenance["seed"], 7);
  EXPECT_EQ(back.dims, v.dims());
}

TEST(VolumeFile, PayloadIsLittleEndianZyx) {
  TempDir dir;
  Volume v(Dims{2, 1, 2}, 0.f);
  v(0, 0, 0) = 1.0f;
  v(1, 0, 1) = -2.0f;
  const std::string p = dir.file("v.f32");
  io::write_volume(p, v);
  const auto bytes = slurp(p);
  ASSERT_EQ(bytes.size(), 16u);
  const std::vector<unsigned char> one{0x00, 0x00, 0x80, 0x3f}, m2{0x00, 0x00, 0x00, 0xc0};
  EXPECT_TRUE(std::equal(one.begin(), one.end(), bytes.begin()));
  EXPECT_TRUE(std::equal(m2.begin(), m2.end(), bytes.begin() + 12));
  const auto side = nlohmann::json::parse(slurp(io::sidecar_path(p)));
  EXPECT_EQ(side["dims"], nlohmann::json({2, 1, 2}));
  EXPECT_EQ(side["dtype"], "f32le");
  EXPECT_EQ(side["order"], "zyx");
}

TEST(VolumeFile, SizeMismatchRejected) {
  TempDir dir;
  const std::string p = dir.file("v.f32");
  io::write_volume(p, Volume(Dims{2, 4, 4}, 1.f));
  fs::resize_file(p, 2 * 4 * 4 * 4 - 4);
  EXPECT_THROW(io::read_volume(p), InvalidInput);
}

TEST(VolumeFile, BadSidecarRejected) {
  TempDir dir;
  const std::string p = dir.file("v.f32");
  EXPECT_THROW(io::read_volume(p), InvalidInput);
  io::write_volume(p, Volume(Dims{1, 2, 2}, 1.f));
  auto side = nlohmann::json::parse(slurp(io::sidecar_path(p)));
  side["dtype"] = "f64le";
  std::ofstream(io::sidecar_path(p)) << side.dump();
  EXPECT_THROW(io::read_volume(p), InvalidInput);
  side["dtype"] = "f32le";
  side["dims"] = {1, 2};
  std::ofstream(io::sidecar_path(p)) << side.dump();
  EXPECT_THROW(io::read_volume(p), InvalidInput);
  std::ofstream(io::sidecar_path(p)) << "{not json";
  EXPECT_THROW(io::read_volume(p), InvalidInput);
}

TEST(RunConfig, DefaultsMatchReferenceSetup) {
  const io::RunConfig c = io::run_config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.chain.rho_d.start, 5.0);
  EXPECT_EQ(c.chain.rho_d.end, 0.025);
  EXPECT_EQ(c.chain.rho_tv.start, 5.0);
  EXPECT_EQ(c.chain.rho_tv.end, 2.0);
  EXPECT_EQ(c.chain.batch_size, 16u);
  EXPECT_EQ(c.chain.budget, 12u);
  EXPECT_EQ(c.chain.collect, 20u);
  EXPECT_NO_THROW(c.validate(128));
}

TEST(RunConfig, RoundTrip) {
  io::RunConfig c;
  c.chain.iterations = 77;
  c.chain.burn_in = 10;
  c.chain.collect = 5;
  c.chain.rho_d = {3.0, 0.1, 40};
  c.chain.coverage = 2;
  c.chain.budget = 20;
  c.chain.cover_refresh = CoverRefresh::once;
  c.chain.cover_method = CoverMethod::sliding_window;
  c.chain.tv_lambda = 0.3;
  c.chain.seed = 0xdeadbeefcafeULL;
  c.chain.threads = 4;
  c.prior.kind = "score_gaussian";
  c.prior.edm.steps = 33;
  c.prior.edm.churn = ChurnMode::classic;
  const auto j1 = io::to_json(c);
  const io::RunConfig back = io::run_config_from_json(j1);
  const auto j2 = io::to_json(back);
  EXPECT_EQ(j1, j2);
  EXPECT_EQ(io::to_json(io::run_config_from_json(nlohmann::json::parse(j2.dump()))), j1);
  EXPECT_EQ(back.chain.seed, c.chain.seed);
  EXPECT_EQ(back.chain.cover_refresh, CoverRefresh::once);
  EXPECT_EQ(back.prior.edm.churn, ChurnMode::classic);
}

TEST(RunConfig, UnknownOrBadValuesRejected) {
  EXPECT_THROW(io::run_config_from_json({{"iterations", 10}, {"iteratoins", 3}}), InvalidInput);
  EXPECT_THROW(io::run_config_from_json({{"iterations", "many"}}), InvalidInput);
  EXPECT_THROW(io::run_config_from_json({{"prior", {{"kind", "neural"}}}}), InvalidInput);
  EXPECT_THROW(io::run_config_from_json({{"cover", {{"refresh", "sometimes"}}}}), InvalidInput);
  EXPECT_THROW(io::run_config_from_json({{"prior", {{"edm", {{"churn", "lots"}}}}}}), InvalidInput);
  EXPECT_THROW(io::run_config_from_json(nlohmann::json::array()), InvalidInput);
  TempDir dir;
  const std::string p = dir.file("cfg.json");
  std::ofstream(p) << "{\"iterations\": ";
  EXPECT_THROW(io::read_run_config(p), InvalidInput);
  EXPECT_THROW(io::read_run_config(dir.file("missing.json")), InvalidInput);
}

TEST(RunConfig, ForwardRecordRoundTrip) {
  const ForwardModel m = ForwardModel::downsample(32, 24, 4, 0.02, DownsampleAxes::y_only);
  const ForwardModel back = io::forward_from_json(io::forward_json(m));
  EXPECT_EQ(back.kind(), ModelKind::downsample);
  EXPECT_EQ(back.factor(), 4u);
  EXPECT_EQ(back.axes(), DownsampleAxes::y_only);
  EXPECT_EQ(back.noise_sigma(), 0.02);
  EXPECT_EQ(back.domain_height(), 32u);
  EXPECT_EQ(back.domain_width(), 24u);
  EXPECT_THROW(io::forward_from_json({{"kind", "blur"}, {"domain", {4, 4}}, {"sigma", 0.0}}), InvalidInput);
}

TEST(RunConfig, BuildPrior) {
  io::PriorConfig p;
  auto g = io::build_prior(p, 6, 5);
  ASSERT_TRUE(g);
  p.kind = "fit";
  EXPECT_THROW(io::build_prior(p, 6, 5), InvalidInput);
  p.kind = "bogus";
  EXPECT_THROW(io::build_prior(p, 6, 5), InvalidInput);
}
