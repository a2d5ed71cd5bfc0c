// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

namespace sparsevox {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or corrupt input (bad magic, truncation, CRC mismatch, ...).
struct FormatError : Error {
  using Error::Error;
};

/// Well-formed input that this library does not handle (e.g. non-PCM WAV).
struct UnsupportedError : Error {
  using Error::Error;
};

inline uint32_t crc32_bytes(std::span<const uint8_t> data, uint32_t seed = 0) {
  uint32_t crc = ::crc32(seed, nullptr, 0);
  return static_cast<uint32_t>(
      ::crc32(crc, reinterpret_cast<const Bytef*>(data.data()),
              static_cast<uInt>(data.size())));
}

/// Derives independent RNG stream seeds from a master seed and indices
/// (splitmix64 finalizer applied to a running combination).
inline uint64_t mix_seed(uint64_t seed) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

template <typename... Ix>
uint64_t mix_seed(uint64_t seed, uint64_t index, Ix... rest) {
  return mix_seed(mix_seed(seed) + index, rest...);
}

/// Deterministic random stream. mt19937_64 state evolution is pinned by the
/// standard, and the distributions are written out here, so identical seeds
/// give bit-identical values on any conforming implementation (the standard
/// library's distribution objects carry no such guarantee).
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return (gen_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  int uniform_int(int n) { return static_cast<int>(uniform() * n); }

  /// Standard normal via Box-Muller.
  double gauss() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(1.0 - uniform()));
    const double theta = 2.0 * M_PI * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Little-endian buffer IO.

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) { raw(&v, sizeof v); }
  void u32(uint32_t v) { raw(&v, sizeof v); }
  void u64(uint64_t v) { raw(&v, sizeof v); }
  void i32(int32_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }

  void bytes(std::span<const uint8_t> b) { raw(b.data(), b.size()); }

  void magic(const char tag[4]) { raw(tag, 4); }

  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  const std::vector<uint8_t>& data() const { return buf_; }

  /// Appends a CRC32 of everything written so far.
  void crc_trailer() { u32(crc32_bytes(buf_)); }

 private:
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

  uint8_t u8() { return take(1)[0]; }
  uint16_t u16() { return read<uint16_t>(); }
  uint32_t u32() { return read<uint32_t>(); }
  uint64_t u64() { return read<uint64_t>(); }
  int32_t i32() { return read<int32_t>(); }
  float f32() { return read<float>(); }
  double f64() { return read<double>(); }

  void magic(const char tag[4], const char* what) {
    auto b = take(4);
    if (std::memcmp(b.data(), tag, 4) != 0)
      throw FormatError(std::string("bad magic, not a ") + what + " file");
  }

  std::string str() {
    uint32_t n = u32();
    auto b = take(n);
    return std::string(reinterpret_cast<const char*>(b.data()), n);
  }

  std::span<const uint8_t> take(size_t n) {
    if (pos_ + n > data_.size()) throw FormatError("truncated input");
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return data_.size() - pos_; }
  bool eof() const { return pos_ == data_.size(); }

  /// Validates a trailing CRC32 over all preceding bytes. Call before parsing.
  static void check_crc_trailer(std::span<const uint8_t> data, const char* what) {
    if (data.size() < 4) throw FormatError("truncated input");
    uint32_t stored;
    std::memcpy(&stored, data.data() + data.size() - 4, 4);
    uint32_t actual = crc32_bytes(data.first(data.size() - 4));
    if (stored != actual)
      throw FormatError(std::string(what) + ": CRC mismatch, file corrupt");
  }

 private:
  template <typename T>
  T read() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }
  std::span<const uint8_t> data_;
  size_t pos_ = 0;
};

inline std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::filesystem::path& path,
                       std::span<const uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace sparsevox
