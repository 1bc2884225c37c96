#pragma once

// Shared plumbing: error type, deterministic RNG, hashing, small helpers.

#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedsim {

// Error categories map 1:1 onto CLI / C-API status codes.
enum class ErrorCode : int {
  ok = 0,
  runtime = 1,
  config = 2,
  protocol = 3,
  selftest = 4,
  io = 5,
  shape = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

// Deterministic RNG. mt19937_64 has a standard-specified output sequence; the
// uniform/normal mappings are done by hand so draws are bit-identical across
// platforms (std::normal_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one value per call, the pair partner is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    // Modulo bias is irrelevant at desk scale but cheap to avoid.
    uint64_t limit = ~uint64_t(0) - (~uint64_t(0) % n);
    uint64_t x = eng_();
    while (x >= limit) x = eng_();
    return x % n;
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// FNV-1a 64-bit, used for config hashes in run-info files.
inline uint64_t fnv1a64(const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Little-endian scalar IO on byte buffers (container + wire formats).
inline void put_bytes(std::vector<uint8_t>& out, const void* p, size_t n) {
  const auto* b = static_cast<const uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>((uint64_t(v) >> (8 * i)) & 0xff));
}

inline void put_f64_le(std::vector<uint8_t>& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_le<uint64_t>(out, bits);
}

class ByteReader {
 public:
  ByteReader(const uint8_t* data, size_t size) : p_(data), end_(data + size) {}

  template <typename T>
  T get_le() {
    static_assert(std::is_integral_v<T>);
    need(sizeof(T));
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= uint64_t(p_[i]) << (8 * i);
    p_ += sizeof(T);
    return static_cast<T>(v);
  }

  double get_f64_le() {
    uint64_t bits = get_le<uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string get_string(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }

  size_t remaining() const { return size_t(end_ - p_); }

 private:
  void need(size_t n) { require(remaining() >= n, ErrorCode::io, "truncated data"); }
  const uint8_t* p_;
  const uint8_t* end_;
};

}  // namespace fedsim
