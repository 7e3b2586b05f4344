#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

namespace vfedsec {

// Base error for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration, schema, or CLI input. Maps to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A protocol precondition was violated at runtime. Maps to exit code 3.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Ciphertext failed authentication.
class AuthError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string StrCat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

#define VFS_ENFORCE(cond, ...)                                    \
  do {                                                            \
    if (!(cond)) {                                                \
      throw ::vfedsec::Error(::vfedsec::detail::StrCat(__VA_ARGS__)); \
    }                                                             \
  } while (0)

#define VFS_ENFORCE_T(ErrType, cond, ...)                             \
  do {                                                                \
    if (!(cond)) {                                                    \
      throw ErrType(::vfedsec::detail::StrCat(__VA_ARGS__));          \
    }                                                                 \
  } while (0)

using RealMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RealVector = Eigen::RowVectorXd;

using Rng = std::mt19937_64;

// Uniform double in [0, 1) with 53 bits of mantissa; independent of the
// standard library's distribution implementations.
inline double Uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline uint64_t SplitMix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Purposes for derived random streams. Values are part of the reproducibility
// contract; never renumber.
enum class Stream : uint64_t {
  kInit = 1,
  kBatch = 2,
  kRounding = 3,
  kKeygen = 4,
  kDropout = 5,
  kPartition = 6,
  kSplit = 7,
  kSynth = 8,
};

// Deterministic child seed for (master, purpose, path...).
inline uint64_t DeriveSeed(uint64_t master, Stream purpose,
                           std::initializer_list<uint64_t> path = {}) {
  uint64_t h = SplitMix64(master ^ 0x76664564736563ULL);
  h = SplitMix64(h ^ static_cast<uint64_t>(purpose));
  for (uint64_t p : path) h = SplitMix64(h ^ p);
  return h;
}

inline Rng MakeRng(uint64_t master, Stream purpose,
                   std::initializer_list<uint64_t> path = {}) {
  return Rng(DeriveSeed(master, purpose, path));
}

}  // namespace vfedsec
