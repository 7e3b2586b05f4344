#include "vfedsec/qcode.h"

#include <sodium.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <vector>

namespace vfedsec {

void QConfig::Validate(uint64_t max_summands) const {
  VFS_ENFORCE_T(ConfigError, std::isfinite(t) && t > 0,
                "qcode.t: clip threshold must be positive, got ", t);
  VFS_ENFORCE_T(ConfigError, std::isfinite(t_update) && t_update > 0,
                "qcode.t_update: clip threshold must be positive, got ",
                t_update);
  VFS_ENFORCE_T(ConfigError, r > 0 && std::has_single_bit(r),
                "qcode.r: range must be a power of two, got ", r);
  VFS_ENFORCE_T(ConfigError, max_summands >= 1 && max_summands <= MaxSummands(),
                "qcode.r: ", max_summands, " summands of range ", r,
                " overflow the 2^32 ring (max ", MaxSummands(), ")");
}

uint64_t QConfig::MaxSummands() const {
  // n * r < 2^32
  return (kFieldModulus - 1) / r;
}

QMatrix::QMatrix(size_t rows, size_t cols, std::vector<uint32_t> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  VFS_ENFORCE(data_.size() == rows_ * cols_, "QMatrix: data length ",
              data_.size(), " != ", rows_, "x", cols_);
}

QMatrix& QMatrix::operator+=(const QMatrix& o) {
  VFS_ENFORCE(SameShape(o), "QMatrix shape mismatch: ", rows_, "x", cols_,
              " vs ", o.rows_, "x", o.cols_);
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

QMatrix operator+(QMatrix a, const QMatrix& b) {
  a += b;
  return a;
}

QMatrix Negate(QMatrix a) {
  for (uint32_t& v : a.values()) v = 0u - v;
  return a;
}

uint32_t QuantizeScalar(double x, const QConfig& cfg, Rng& rng) {
  VFS_ENFORCE(std::isfinite(x), "non-finite input");
  const double clipped = std::clamp(x, -cfg.t, cfg.t);
  const double scaled =
      (clipped + cfg.t) / (2.0 * cfg.t) * static_cast<double>(cfg.r);
  const double lo = std::floor(scaled);
  const double frac = scaled - lo;
  double q = lo;
  // Exact grid points consume no randomness.
  if (frac > 0 && Uniform01(rng) < frac) q += 1.0;
  return static_cast<uint32_t>(std::min(q, static_cast<double>(cfg.r)));
}

QMatrix QuantizeMatrix(const RealMatrix& x, const QConfig& cfg, Rng& rng) {
  VFS_ENFORCE(x.allFinite(), "non-finite input");
  QMatrix out(x.rows(), x.cols());
  auto dst = out.values();
  const double* src = x.data();
  uint8_t seed[randombytes_SEEDBYTES];
  for (size_t i = 0; i < sizeof(seed); i += 8) {
    const uint64_t w = rng();
    for (size_t k = 0; k < 8; ++k) seed[i + k] = static_cast<uint8_t>(w >> (8 * k));
  }
  std::vector<uint32_t> bits(dst.size());
  randombytes_buf_deterministic(bits.data(), bits.size() * 4, seed);
  if constexpr (std::endian::native == std::endian::big)
    for (uint32_t& b : bits) b = __builtin_bswap32(b);
  const double scale = static_cast<double>(cfg.r) / (2.0 * cfg.t);
  const double top = static_cast<double>(cfg.r);
  for (size_t i = 0; i < dst.size(); ++i) {
    const double scaled = (std::clamp(src[i], -cfg.t, cfg.t) + cfg.t) * scale;
    // scaled >= 0, so truncation is floor.
    const double lo = static_cast<double>(static_cast<uint64_t>(scaled));
    const double up = static_cast<double>(bits[i]) < (scaled - lo) * 0x1.0p32 ? 1.0 : 0.0;
    dst[i] = static_cast<uint32_t>(std::min(lo + up, top));
  }
  return out;
}

double DequantizeScalar(uint32_t s, uint64_t n_summands, const QConfig& cfg) {
  return cfg.Step() * static_cast<double>(s) -
         static_cast<double>(n_summands) * cfg.t;
}

RealMatrix DequantizeSum(const QMatrix& s, uint64_t n_summands,
                         const QConfig& cfg) {
  VFS_ENFORCE(n_summands > 0, "dequantize_sum: n_summands must be positive");
  RealMatrix out(s.rows(), s.cols());
  auto src = s.values();
  double* dst = out.data();
  for (size_t i = 0; i < src.size(); ++i)
    dst[i] = DequantizeScalar(src[i], n_summands, cfg);
  return out;
}

}  // namespace vfedsec
