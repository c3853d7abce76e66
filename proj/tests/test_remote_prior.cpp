#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <functional>
#include <filesystem>
#include <mutex>
#include <thread>
#include <vector>

#include "psi3d/remote_prior.hpp"
#include "psi3d/sampler.hpp"
#include "test_util.hpp"

using namespace psi3d;
using namespace psi3d::bridge;
using psi3d::testutil::random_volume;

namespace {

GaussianAnalyticPrior reference_prior(std::size_t h, std::size_t w) {
  return GaussianAnalyticPrior::isotropic(Plane::Constant(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w), 0.5),
                                          0.05);
}

// Minimal in-process stand-in for the reference server: one thread per
// connection, reference Gaussian prior, optional misbehaviour.
class FakeServer {
 public:
  enum class Mode { ok, wrong_dims, error_status, hang_up };

  using Factory = std::function<GaussianAnalyticPrior(std::size_t, std::size_t)>;

  explicit FakeServer(Mode mode = Mode::ok, std::size_t die_after = SIZE_MAX, Factory prior = reference_prior)
      : mode_(mode), die_after_(die_after), prior_(std::move(prior)) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0)
      throw std::runtime_error("fake server: bind/listen failed");
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }
  ~FakeServer() { stop(); }

  std::uint16_t port() const { return port_; }
  std::size_t samples_served() const { return served_; }

  void stop() {
    if (stopped_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    {
      std::lock_guard lock(mu_);
      for (int fd : conns_) ::shutdown(fd, SHUT_RDWR);
    }
    for (auto& t : workers_) t.join();
  }

 private:
  void accept_loop() {
    while (!stopped_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) return;
      std::lock_guard lock(mu_);
      conns_.push_back(fd);
      workers_.emplace_back([this, fd] { serve(fd); });
    }
  }

  static bool read_exact(int fd, unsigned char* p, std::size_t n) {
    while (n > 0) {
      const ssize_t r = ::recv(fd, p, n, 0);
      if (r <= 0) return false;
      p += r;
      n -= static_cast<std::size_t>(r);
    }
    return true;
  }
  static void write_all(int fd, const std::vector<unsigned char>& b) {
    std::size_t off = 0;
    while (off < b.size()) {
      const ssize_t n = ::send(fd, b.data() + off, b.size() - off, MSG_NOSIGNAL);
      if (n <= 0) return;
      off += static_cast<std::size_t>(n);
    }
  }

  void serve(int fd) {
    for (;;) {
      unsigned char head[4];
      if (!read_exact(fd, head, 4)) break;
      binary::Reader hr(std::span<const unsigned char>(head, 4));
      const std::uint32_t len = hr.get_u32();
      if (len > kMaxFrame) break;
      std::vector<unsigned char> payload(len);
      if (!read_exact(fd, payload.data(), len)) break;
      Response s;
      Request q;
      try {
        q = decode_request_payload(payload);
      } catch (const ProtocolError& e) {
        s.status = Status::error;
        s.message = e.what();
        write_all(fd, encode_response(s));
        break;
      }
      if (q.op == Op::shutdown) break;
      if (q.op == Op::sample) {
        if (served_.fetch_add(1) >= die_after_ || mode_ == Mode::hang_up) break;
        if (mode_ == Mode::error_status) {
          s.status = Status::error;
          s.message = "model not loaded";
        } else {
          const GaussianAnalyticPrior g = prior_(q.height, q.width);
          Slice in(q.height, q.width, 0);
          std::copy(q.data.begin(), q.data.end(), in.values.begin());
          NormalStream noise(q.seed, 1.0);
          const Slice out = g.sample(in, q.rho, noise);
          s.data.assign(out.values.begin(), out.values.end());
          if (mode_ == Mode::wrong_dims) s.data.pop_back();
        }
      }
      write_all(fd, encode_response(s));
    }
    ::close(fd);
    std::lock_guard lock(mu_);
    std::erase(conns_, fd);
  }

  Mode mode_;
  std::size_t die_after_;
  Factory prior_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopped_{false};
  std::atomic<std::size_t> served_{0};
  std::thread acceptor_;
  std::mutex mu_;
  std::vector<int> conns_;
  std::vector<std::thread> workers_;
};

// A loopback port with nothing listening.
std::uint16_t dead_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  return ntohs(addr.sin_port);
}

RemoteOptions fast_options() {
  RemoteOptions o;
  o.timeout = std::chrono::milliseconds(2000);
  o.retries = 2;
  o.retry_delay = std::chrono::milliseconds(5);
  return o;
}

Request random_request(SplitMix64& bits) {
  Request q;
  q.op = static_cast<Op>(1 + bits() % 3);
  q.rho = std::bit_cast<double>(bits());
  q.height = static_cast<std::uint32_t>(bits() % 9);
  q.width = static_cast<std::uint32_t>(bits() % 9);
  q.seed = bits();
  q.data.resize(static_cast<std::size_t>(q.height) * q.width);
  for (float& f : q.data) f = std::bit_cast<float>(static_cast<std::uint32_t>(bits()));
  return q;
}

// Bitwise equality; NaN payloads from random bit patterns defeat operator==.
bool same_bits(const Request& a, const Request& b) {
  return a.op == b.op && std::bit_cast<std::uint64_t>(a.rho) == std::bit_cast<std::uint64_t>(b.rho) &&
         a.height == b.height && a.width == b.width && a.seed == b.seed && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * 4) == 0;
}

}  // namespace

TEST(Wire, RequestLayout) {
  Request q;
  q.op = Op::sample;
  q.rho = 0.5;
  q.height = 1;
  q.width = 2;
  q.seed = 0x0102030405060708ULL;
  q.data = {1.0f, -2.0f};
  const auto f = encode_request(q);
  const std::vector<unsigned char> expect{
      37,   0,    0,    0,                                   // length
      'P',  'D',  'P',  '1',  1,                           // magic, op
      0,    0,    0,    0,    0,    0,    0xe0, 0x3f,      // rho
      1,    0,    0,    0,    2,    0,    0,    0,         // H, W
      8,    7,    6,    5,    4,    3,    2,    1,         // seed
      0,    0,    0x80, 0x3f, 0,    0,    0,    0xc0};     // data
  EXPECT_EQ(f, expect);
  EXPECT_EQ(decode_request_payload(unframe(f)), q);
}

TEST(Wire, ResponseRoundTrip) {
  Response ok;
  ok.data = {0.25f, 3.5f, -1e-40f};
  EXPECT_EQ(decode_response_payload(unframe(encode_response(ok))), ok);
  Response err;
  err.status = Status::error;
  err.message = "bad rho";
  EXPECT_EQ(decode_response_payload(unframe(encode_response(err))), err);
  Response ping;
  EXPECT_EQ(decode_response_payload(unframe(encode_response(ping))), ping);
}

TEST(Wire, FuzzRoundTrip) {
  SplitMix64 bits(2024);
  for (int i = 0; i < 10000; ++i) {
    const Request q = random_request(bits);
    const auto f = encode_request(q);
    ASSERT_EQ(f.size(), 4u + 29u + 4u * q.data.size());
    ASSERT_TRUE(same_bits(decode_request_payload(unframe(f)), q)) << "case " << i;
  }
}

TEST(Wire, MalformedFramesRejected) {
  SplitMix64 bits(77);
  std::size_t rejected = 0;
  for (int i = 0; i < 10000; ++i) {
    auto f = encode_request(random_request(bits));
    switch (bits() % 4) {
      case 0: f[4 + bits() % 4] ^= 0x20; break;                 // magic
      case 1: f.resize(4 + bits() % (f.size() - 4)); break;      // truncate
      case 2: f.push_back(static_cast<unsigned char>(bits())); break;  // trailing byte
      case 3: f[8] = static_cast<unsigned char>(4 + bits() % 250); break;  // op
    }
    try {
      decode_request_payload(unframe(f));
    } catch (const ProtocolError&) {
      ++rejected;
    }
  }
  EXPECT_EQ(rejected, 10000u);

  // Payload consistent with its frame but not with its header.
  Request q;
  q.height = 2;
  q.width = 2;
  q.data = {1, 2, 3, 4};
  auto payload = encode_request_payload(q);
  payload.resize(payload.size() - 4);
  EXPECT_THROW(decode_request_payload(payload), ProtocolError);
  EXPECT_THROW(encode_request_payload(Request{Op::sample, 1.0, 3, 3, 0, {1.f}}), InvalidInput);

  std::vector<unsigned char> huge{0xff, 0xff, 0xff, 0xff};
  EXPECT_THROW(unframe(huge), ProtocolError);
  auto r = encode_response(Response{});
  r[8] = 7;  // status
  EXPECT_THROW(decode_response_payload(unframe(r)), ProtocolError);
  Response ok;
  ok.data = {1.f};
  auto odd = encode_response_payload(ok);
  odd.pop_back();
  EXPECT_THROW(decode_response_payload(odd), ProtocolError);
}

TEST(Address, Parsing) {
  EXPECT_EQ(parse_remote_address("remote:localhost:7070"), (std::pair<std::string, std::uint16_t>{"localhost", 7070}));
  EXPECT_EQ(parse_remote_address("127.0.0.1:9"), (std::pair<std::string, std::uint16_t>{"127.0.0.1", 9}));
  EXPECT_EQ(parse_remote_address("remote:[::1]:80").first, "::1");
  EXPECT_THROW(parse_remote_address("remote:host"), InvalidInput);
  EXPECT_THROW(parse_remote_address("remote:host:0"), InvalidInput);
  EXPECT_THROW(parse_remote_address("remote:host:70000"), InvalidInput);
  EXPECT_THROW(parse_remote_address("remote:host:80x"), InvalidInput);
}

TEST(Client, MatchesInProcessSample) {
  FakeServer server;
  RemotePrior remote("127.0.0.1", server.port(), fast_options());
  EXPECT_TRUE(remote.ping());
  const GaussianAnalyticPrior local = reference_prior(8, 8);
  const Plane x = testutil::random_plane(8, 8, 5, 0.3);
  Slice s = Slice::from_plane(x.cast<float>().cast<double>(), 3);
  NormalStream a(99, 1.0), b(99, 1.0);
  const Slice r = remote.sample(s, 0.4, a);
  const Slice l = local.sample(s, 0.4, b);
  EXPECT_EQ(r.index, 3u);
  for (std::size_t i = 0; i < r.values.size(); ++i) EXPECT_EQ(r.values[i], static_cast<double>(static_cast<float>(l.values[i])));
}

TEST(Client, ScalarConjugateMean) {
  // m = 0, P = 1, rho = 1, x = 2: posterior mean 1, variance 1/2.
  FakeServer server(FakeServer::Mode::ok, SIZE_MAX, [](std::size_t h, std::size_t w) {
    return GaussianAnalyticPrior::isotropic(Plane::Zero(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w)), 1.0);
  });
  RemotePrior remote("127.0.0.1", server.port(), fast_options());
  Slice x(1, 1, 0);
  x.values[0] = 2.0;
  double sum = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    NormalStream ns(static_cast<std::uint64_t>(i), 1.0);
    sum += remote.sample(x, 1.0, ns).values[0];
  }
  EXPECT_NEAR(sum / n, 1.0, 0.03);
  EXPECT_NEAR(sum / n, 1.0, 4 * std::sqrt(0.5 / n));
}

TEST(Client, UnreachableServerRaisesAfterRetries) {
  RemotePrior remote("127.0.0.1", dead_port(), fast_options());
  Slice s(2, 2, 0);
  NormalStream n(1, 1.0);
  try {
    remote.sample(s, 1.0, n);
    FAIL() << "expected PriorUnavailable";
  } catch (const PriorUnavailable& e) {
    EXPECT_NE(std::string(e.what()).find("3 attempts"), std::string::npos);
  }
  EXPECT_THROW(remote.ping(), PriorUnavailable);
}

TEST(Client, HangUpRaisesAfterRetries) {
  FakeServer server(FakeServer::Mode::hang_up);
  RemotePrior remote("127.0.0.1", server.port(), fast_options());
  Slice s(2, 2, 0);
  NormalStream n(1, 1.0);
  EXPECT_THROW(remote.sample(s, 1.0, n), PriorUnavailable);
  EXPECT_EQ(server.samples_served(), 3u);
}

TEST(Client, WrongDimsAndErrorStatus) {
  {
    FakeServer server(FakeServer::Mode::wrong_dims);
    RemotePrior remote("127.0.0.1", server.port(), fast_options());
    Slice s(3, 3, 0);
    NormalStream n(1, 1.0);
    EXPECT_THROW(remote.sample(s, 1.0, n), ProtocolError);
  }
  {
    FakeServer server(FakeServer::Mode::error_status);
    RemotePrior remote("127.0.0.1", server.port(), fast_options());
    Slice s(3, 3, 0);
    NormalStream n(1, 1.0);
    try {
      remote.sample(s, 1.0, n);
      FAIL() << "expected ProtocolError";
    } catch (const ProtocolError& e) {
      EXPECT_NE(std::string(e.what()).find("model not loaded"), std::string::npos);
    }
  }
}

TEST(Client, NonUnitNoiseScaleRejected) {
  FakeServer server;
  RemotePrior remote("127.0.0.1", server.port(), fast_options());
  Slice s(2, 2, 0);
  NormalStream silent = NormalStream::silent(3);
  EXPECT_THROW(remote.sample(s, 1.0, silent), UnsupportedOperator);
}

namespace {

ChainConfig bridge_config() {
  ChainConfig c;
  c.iterations = 100;
  c.burn_in = 80;
  c.sample_every = 2;
  c.collect = 10;
  c.rho_d = {1.0, 0.1, 60};
  c.rho_tv = {1.0, 0.5, 60};
  c.batch_size = 4;
  c.coverage = 1;
  c.budget = 3;
  c.tv_lambda = 0.1;
  c.seed = 5;
  c.keep_samples = true;
  return c;
}

}  // namespace

TEST(Client, RemoteChainEqualsInProcessChain) {
  const ForwardModel model = ForwardModel::downsample(8, 8, 2, 0.05);
  const Volume y = degrade(model, random_volume({8, 8, 8}, 1, 0.5, 0.2), 2);
  const ChainConfig c = bridge_config();
  const GaussianAnalyticPrior local = reference_prior(8, 8);
  const ChainState a = run_chain(model, y, c, local);
  FakeServer server;
  ChainState b;
  {
    RemotePrior remote("127.0.0.1", server.port(), fast_options());
    b = run_chain(model, y, c, remote);
  }
  EXPECT_EQ(server.samples_served(), 100u * 3u * 4u);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_EQ(a.samples[i].storage(), b.samples[i].storage());
  EXPECT_EQ(a.x.storage(), b.x.storage());
}

TEST(Client, ServerKillAbortsWithCheckpoint) {
  const ForwardModel model = ForwardModel::downsample(8, 8, 2, 0.05);
  const Volume y = degrade(model, random_volume({8, 8, 8}, 1, 0.5, 0.2), 2);
  ChainConfig c = bridge_config();
  const auto dir = std::filesystem::temp_directory_path() / "psi3d_remote_kill";
  std::filesystem::create_directories(dir);
  c.checkpoint_path = (dir / "ck.bin").string();
  // 12 prior calls per iteration; the server dies during iteration 4.
  FakeServer server(FakeServer::Mode::ok, 12 * 4 + 3);
  RemotePrior remote("127.0.0.1", server.port(), fast_options());
  try {
    run_chain(model, y, c, remote);
    FAIL() << "expected ChainAborted";
  } catch (const ChainAborted& e) {
    EXPECT_EQ(e.checkpoint(), c.checkpoint_path);
    EXPECT_THROW(std::rethrow_exception(e.cause()), PriorUnavailable);
  }
  const ChainState ck = load_checkpoint(c.checkpoint_path);
  EXPECT_EQ(ck.iteration, 4u);
  const ChainState resumed = run_chain(model, y, c, reference_prior(8, 8), {}, ck);
  const ChainState full = run_chain(model, y, c, reference_prior(8, 8));
  EXPECT_EQ(resumed.x.storage(), full.x.storage());
  std::filesystem::remove_all(dir);
}
