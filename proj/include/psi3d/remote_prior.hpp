#pragma once

// Client for an external denoising-posterior server.
//
// Frame: u32le payload length, then payload.
//   request  "PDP1" | op u8 | rho f64 | H u32 | W u32 | seed u64 | H*W f32
//   response "PDP1" | status u8 | H*W f32 (status 0) or UTF-8 message (status 1)
// The server draws the noise from `seed`, so a chain stays reproducible
// across server restarts.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "psi3d/binary.hpp"
#include "psi3d/errors.hpp"
#include "psi3d/prior.hpp"
#include "psi3d/volume.hpp"

namespace psi3d::bridge {

inline constexpr char kMagic[4] = {'P', 'D', 'P', '1'};
inline constexpr std::uint32_t kMaxFrame = 256u * 1024u * 1024u;

enum class Op : std::uint8_t { sample = 1, ping = 2, shutdown = 3 };
enum class Status : std::uint8_t { ok = 0, error = 1 };

struct Request {
  Op op = Op::sample;
  double rho = 0.0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint64_t seed = 0;
  std::vector<float> data;

  bool operator==(const Request&) const = default;
};

struct Response {
  Status status = Status::ok;
  std::vector<float> data;
  std::string message;

  bool operator==(const Response&) const = default;
};

namespace detail {
inline void check_magic(binary::Reader& r) {
  auto m = r.get_bytes(4);
  if (std::memcmp(m.data(), kMagic, 4) != 0)
    throw ProtocolError("bad magic " + std::string(m.begin(), m.end()) + ", expected PDP1");
}

inline std::vector<unsigned char> frame(std::vector<unsigned char> payload) {
  if (payload.size() > kMaxFrame) throw ProtocolError("frame of " + std::to_string(payload.size()) + " bytes exceeds 256 MiB");
  binary::Writer w;
  w.put_u32(static_cast<std::uint32_t>(payload.size()));
  w.put_bytes(payload);
  return w.take();
}
}  // namespace detail

/// Payload bytes (without the length prefix).
inline std::vector<unsigned char> encode_request_payload(const Request& q) {
  if (static_cast<std::uint64_t>(q.height) * q.width != q.data.size())
    throw InvalidInput("request data has " + std::to_string(q.data.size()) + " values for " + std::to_string(q.height) +
                       "x" + std::to_string(q.width));
  binary::Writer w;
  w.put_text(std::string_view(kMagic, 4));
  w.put_u8(static_cast<std::uint8_t>(q.op));
  w.put_f64(q.rho);
  w.put_u32(q.height);
  w.put_u32(q.width);
  w.put_u64(q.seed);
  for (float f : q.data) w.put_f32(f);
  return w.take();
}

inline std::vector<unsigned char> encode_request(const Request& q) {
  return detail::frame(encode_request_payload(q));
}

inline Request decode_request_payload(std::span<const unsigned char> payload) {
  binary::Reader r(payload);
  detail::check_magic(r);
  Request q;
  const std::uint8_t op = r.get_u8();
  if (op < 1 || op > 3) throw ProtocolError("unknown op " + std::to_string(op));
  q.op = static_cast<Op>(op);
  q.rho = r.get_f64();
  q.height = r.get_u32();
  q.width = r.get_u32();
  q.seed = r.get_u64();
  const std::uint64_t n = static_cast<std::uint64_t>(q.height) * q.width;
  if (r.remaining() != n * 4)
    throw ProtocolError("payload carries " + std::to_string(r.remaining()) + " data bytes, header " +
                        std::to_string(q.height) + "x" + std::to_string(q.width) + " needs " + std::to_string(n * 4));
  q.data.resize(n);
  for (float& f : q.data) f = r.get_f32();
  return q;
}

inline std::vector<unsigned char> encode_response_payload(const Response& s) {
  binary::Writer w;
  w.put_text(std::string_view(kMagic, 4));
  w.put_u8(static_cast<std::uint8_t>(s.status));
  if (s.status == Status::ok)
    for (float f : s.data) w.put_f32(f);
  else
    w.put_text(s.message);
  return w.take();
}

inline std::vector<unsigned char> encode_response(const Response& s) {
  return detail::frame(encode_response_payload(s));
}

inline Response decode_response_payload(std::span<const unsigned char> payload) {
  binary::Reader r(payload);
  detail::check_magic(r);
  Response s;
  const std::uint8_t st = r.get_u8();
  if (st > 1) throw ProtocolError("unknown status " + std::to_string(st));
  s.status = static_cast<Status>(st);
  if (s.status == Status::ok) {
    if (r.remaining() % 4 != 0)
      throw ProtocolError("response data length " + std::to_string(r.remaining()) + " is not a multiple of 4");
    s.data.resize(r.remaining() / 4);
    for (float& f : s.data) f = r.get_f32();
  } else {
    auto msg = r.get_bytes(r.remaining());
    s.message.assign(msg.begin(), msg.end());
  }
  return s;
}

/// Splits a length-prefixed frame; throws on oversize or inconsistent length.
inline std::span<const unsigned char> unframe(std::span<const unsigned char> bytes) {
  binary::Reader r(bytes);
  const std::uint32_t len = r.get_u32();
  if (len > kMaxFrame) throw ProtocolError("frame length " + std::to_string(len) + " exceeds 256 MiB");
  if (r.remaining() != len)
    throw ProtocolError("frame length " + std::to_string(len) + " but " + std::to_string(r.remaining()) +
                        " payload bytes");
  return bytes.subspan(4);
}

// ---------------------------------------------------------------------------
// Socket transport

class Connection {
 public:
  Connection(const std::string& host, std::uint16_t port, std::chrono::milliseconds timeout) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port_s = std::to_string(port);
    if (int rc = ::getaddrinfo(host.c_str(), port_s.c_str(), &hints, &res); rc != 0)
      throw PriorUnavailable("cannot resolve " + host + ": " + ::gai_strerror(rc));
    std::string last = "no addresses";
    for (addrinfo* a = res; a; a = a->ai_next) {
      int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
      if (fd < 0) continue;
      set_timeouts(fd, timeout);
      if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        fd_ = fd;
        break;
      }
      last = std::strerror(errno);
      ::close(fd);
    }
    ::freeaddrinfo(res);
    if (fd_ < 0) throw PriorUnavailable("cannot connect to " + host + ":" + port_s + ": " + last);
  }
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;
  ~Connection() {
    if (fd_ >= 0) ::close(fd_);
  }

  void send_all(std::span<const unsigned char> bytes) {
    std::size_t off = 0;
    while (off < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw PriorUnavailable(std::string("send failed: ") + std::strerror(errno));
      off += static_cast<std::size_t>(n);
    }
  }

  std::vector<unsigned char> recv_exact(std::size_t len) {
    std::vector<unsigned char> out(len);
    std::size_t off = 0;
    while (off < len) {
      const ssize_t n = ::recv(fd_, out.data() + off, len - off, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n == 0) throw PriorUnavailable("connection closed by server");
      if (n < 0) throw PriorUnavailable(std::string("receive failed: ") + std::strerror(errno));
      off += static_cast<std::size_t>(n);
    }
    return out;
  }

  /// One request/response exchange; returns the response payload.
  std::vector<unsigned char> round_trip(std::span<const unsigned char> frame) {
    send_all(frame);
    auto head = recv_exact(4);
    binary::Reader r(head);
    const std::uint32_t len = r.get_u32();
    if (len > kMaxFrame) throw ProtocolError("response frame length " + std::to_string(len) + " exceeds 256 MiB");
    return recv_exact(len);
  }

 private:
  static void set_timeouts(int fd, std::chrono::milliseconds timeout) {
    if (timeout.count() <= 0) return;
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
    tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
  }

  int fd_ = -1;
};

struct RemoteOptions {
  std::chrono::milliseconds timeout{30000};
  std::size_t retries = 3;  ///< extra attempts after the first failure
  std::chrono::milliseconds retry_delay{100};
};

/// Parses "remote:<host>:<port>".
inline std::pair<std::string, std::uint16_t> parse_remote_address(const std::string& spec) {
  std::string rest = spec;
  if (rest.rfind("remote:", 0) == 0) rest = rest.substr(7);
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size())
    throw InvalidInput("remote prior address must be remote:<host>:<port>, got '" + spec + "'");
  std::string host = rest.substr(0, colon);
  if (host.size() > 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
  unsigned long port = 0;
  try {
    std::size_t used = 0;
    port = std::stoul(rest.substr(colon + 1), &used);
    if (used != rest.size() - colon - 1) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw InvalidInput("bad port in remote prior address '" + spec + "'");
  }
  if (port == 0 || port > 65535) throw InvalidInput("port out of range in '" + spec + "'");
  return {host, static_cast<std::uint16_t>(port)};
}

/// PriorSampler backed by a server. Concurrent callers each take a pooled
/// connection; a connection serves one request at a time.
class RemotePrior final : public PriorSampler {
 public:
  RemotePrior(std::string host, std::uint16_t port, RemoteOptions opts = {})
      : host_(std::move(host)), port_(port), opts_(opts) {}

  std::string name() const override { return "remote:" + host_ + ":" + std::to_string(port_); }

  Slice sample(const Slice& noisy, double rho, NormalStream& noise) const override {
    if (noise.scale() != 1.0)
      throw UnsupportedOperator("remote prior draws its own noise; noise scale " + std::to_string(noise.scale()) +
                                " cannot be forwarded");
    Request q;
    q.op = Op::sample;
    q.rho = rho;
    q.height = static_cast<std::uint32_t>(noisy.height);
    q.width = static_cast<std::uint32_t>(noisy.width);
    q.seed = noise.seed();
    q.data.assign(noisy.values.begin(), noisy.values.end());
    const Response s = call(q);
    if (s.status == Status::error) throw ProtocolError("prior server error: " + s.message);
    if (s.data.size() != noisy.values.size())
      throw ProtocolError("prior server returned " + std::to_string(s.data.size()) + " values for a " +
                          std::to_string(noisy.height) + "x" + std::to_string(noisy.width) + " slice (rho=" +
                          std::to_string(rho) + ", seed=" + std::to_string(q.seed) + ")");
    Slice out(noisy.height, noisy.width, noisy.index);
    std::copy(s.data.begin(), s.data.end(), out.values.begin());
    return out;
  }

  bool ping() const {
    Request q;
    q.op = Op::ping;
    return call(q).status == Status::ok;
  }

  /// Asks the server to exit. The server closes the connection without a reply.
  void shutdown() const {
    Request q;
    q.op = Op::shutdown;
    Connection c(host_, port_, opts_.timeout);
    c.send_all(encode_request(q));
  }

  Response call(const Request& q) const {
    const std::vector<unsigned char> frame = encode_request(q);
    std::string last;
    for (std::size_t attempt = 0; attempt <= opts_.retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(opts_.retry_delay);
      std::unique_ptr<Connection> conn;
      try {
        conn = acquire();
        auto payload = conn->round_trip(frame);
        Response s = decode_response_payload(payload);
        release(std::move(conn));
        return s;
      } catch (const PriorUnavailable& e) {
        last = e.what();
      }
    }
    throw PriorUnavailable("prior server " + host_ + ":" + std::to_string(port_) + " unavailable after " +
                           std::to_string(opts_.retries + 1) + " attempts: " + last);
  }

 private:
  std::unique_ptr<Connection> acquire() const {
    {
      std::lock_guard lock(mu_);
      if (!pool_.empty()) {
        auto c = std::move(pool_.back());
        pool_.pop_back();
        return c;
      }
    }
    return std::make_unique<Connection>(host_, port_, opts_.timeout);
  }
  void release(std::unique_ptr<Connection> c) const {
    std::lock_guard lock(mu_);
    pool_.push_back(std::move(c));
  }

  std::string host_;
  std::uint16_t port_;
  RemoteOptions opts_;
  mutable std::mutex mu_;
  mutable std::vector<std::unique_ptr<Connection>> pool_;
};

}  // namespace psi3d::bridge
