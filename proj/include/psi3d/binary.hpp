#pragma once

// Little-endian encoding helpers shared by the volume files, checkpoints and
// the bridge frames. Byte order is fixed regardless of the host.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "psi3d/errors.hpp"

namespace psi3d::binary {

template <class T>
inline T byteswap_if_needed(T v) noexcept {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

class Writer {
 public:
  template <class T>
  void put(T v) {
    v = byteswap_if_needed(v);
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_u8(std::uint8_t v) { bytes_.push_back(v); }
  void put_u32(std::uint32_t v) { put(v); }
  void put_u64(std::uint64_t v) { put(v); }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_bytes(std::span<const unsigned char> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void put_text(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  std::vector<unsigned char>& bytes() noexcept { return bytes_; }
  std::vector<unsigned char> take() noexcept { return std::move(bytes_); }

 private:
  std::vector<unsigned char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return byteswap_if_needed(v);
  }
  std::uint8_t get_u8() { return get<std::uint8_t>(); }
  std::uint32_t get_u32() { return get<std::uint32_t>(); }
  std::uint64_t get_u64() { return get<std::uint64_t>(); }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::span<const unsigned char> get_bytes(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw ProtocolError("truncated data: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                          ", have " + std::to_string(bytes_.size() - pos_));
  }

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace psi3d::binary
