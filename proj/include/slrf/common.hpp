#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace slrf {

// Error taxonomy shared by the C++ core and the C API / CLI exit codes.
enum class ErrorKind {
  Usage,    // bad arguments, malformed config/dataset
  Io,       // missing/unreadable/unwritable files
  Numeric,  // non-finite values, singular transforms
  Internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& msg) {
  throw Error(ErrorKind::Usage, msg);
}
[[noreturn]] inline void fail_io(const std::string& msg) {
  throw Error(ErrorKind::Io, msg);
}
[[noreturn]] inline void fail_numeric(const std::string& msg) {
  throw Error(ErrorKind::Numeric, msg);
}
[[noreturn]] inline void fail_internal(const std::string& msg) {
  throw Error(ErrorKind::Internal, msg);
}

// splitmix64; used to derive independent deterministic streams from
// (seed, purpose, counter) so training can resume mid-run bit-exactly.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream, uint64_t counter) {
  return splitmix64(splitmix64(seed ^ (stream * 0x9e3779b97f4a7c15ULL)) + counter);
}

// Small counter-based generator (pcg32). State is two u64s, cheap to
// reconstruct from (seed, stream, counter) after a resume.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += splitmix64(seed);
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  // [0, n)
  uint32_t next_below(uint32_t n) {
    // Lemire bounded draw, deterministic across platforms.
    uint64_t m = static_cast<uint64_t>(next_u32()) * n;
    return static_cast<uint32_t>(m >> 32);
  }

  // [0, 1)
  double next_double() { return next_u32() * (1.0 / 4294967296.0); }

  // standard normal (Box-Muller, always consumes two draws)
  double next_normal();

 private:
  uint64_t state_;
  uint64_t inc_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace slrf
