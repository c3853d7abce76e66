#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>

namespace psi3d {

/// Input rejected: wrong dimensions, invalid parameters, malformed files.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced or received non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The forward operator has no SVD path (general operators need a gradient
/// based likelihood sampler, which is not provided).
class UnsupportedOperator : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A remote prior could not be reached after the configured retries.
class PriorUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent bridge frame.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace log {

using Sink = std::function<void(std::string_view)>;

namespace detail {
inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}
inline Sink& sink() {
  static Sink s = [](std::string_view msg) { std::clog << "warning: " << msg << '\n'; };
  return s;
}
inline std::atomic<std::size_t>& counter() {
  static std::atomic<std::size_t> c{0};
  return c;
}
}  // namespace detail

/// Replace the warning sink. Passing an empty function silences warnings.
inline void set_sink(Sink sink) {
  std::lock_guard lock(detail::sink_mutex());
  detail::sink() = std::move(sink);
}

inline void warn(std::string_view msg) {
  detail::counter().fetch_add(1, std::memory_order_relaxed);
  std::lock_guard lock(detail::sink_mutex());
  if (detail::sink()) detail::sink()(msg);
}

/// Number of warnings emitted since process start.
inline std::size_t warning_count() { return detail::counter().load(std::memory_order_relaxed); }

}  // namespace log

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidInput(message);
}

}  // namespace psi3d
