#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vfedsec/common.h"

namespace vfedsec {

// Fixed-point code: values in [-t, t] map onto the integer range [0, r].
// Sums of quantized values live in the 2^32 residue ring used for masking.
struct QConfig {
  double t = 4.0;
  uint32_t r = 1u << 27;
  // Clip threshold used for masked model updates.
  double t_update = 4.0;

  static constexpr uint64_t kFieldModulus = uint64_t{1} << 32;

  // Throws ConfigError when t/r are invalid or `max_summands` quantized values
  // could overflow the ring.
  void Validate(uint64_t max_summands = 1) const;

  // Largest summand count whose pre-modular sum stays below 2^32.
  uint64_t MaxSummands() const;

  // Copy with the embedding threshold replaced by the update threshold.
  QConfig ForUpdates() const {
    QConfig c = *this;
    c.t = t_update;
    return c;
  }

  // One quantization step, 2t/r.
  double Step() const { return 2.0 * t / static_cast<double>(r); }
};

// B x H matrix of residues mod 2^32, row-major.
class QMatrix {
 public:
  QMatrix() = default;
  QMatrix(size_t rows, size_t cols, uint32_t fill = 0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  QMatrix(size_t rows, size_t cols, std::vector<uint32_t> data);

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  size_t size() const { return data_.size(); }

  uint32_t& operator()(size_t r, size_t c) { return data_[r * cols_ + c]; }
  uint32_t operator()(size_t r, size_t c) const { return data_[r * cols_ + c]; }

  std::span<uint32_t> values() { return data_; }
  std::span<const uint32_t> values() const { return data_; }

  bool SameShape(const QMatrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  // Element-wise (this + o) mod 2^32.
  QMatrix& operator+=(const QMatrix& o);

  friend bool operator==(const QMatrix&, const QMatrix&) = default;

 private:
  size_t rows_ = 0;
  size_t cols_ = 0;
  std::vector<uint32_t> data_;
};

QMatrix operator+(QMatrix a, const QMatrix& b);
// Element-wise (2^32 - a) mod 2^32.
QMatrix Negate(QMatrix a);

// round_stochastic((clip(x, -t, t) + t) / (2t) * r). Unbiased; the result is
// in [0, r]. Throws Error("non-finite input") for NaN/Inf.
uint32_t QuantizeScalar(double x, const QConfig& cfg, Rng& rng);

// Same rounding rule; the rounding bits are one ChaCha20 stream keyed by four
// draws of rng, compared against the fraction at 32-bit resolution.
QMatrix QuantizeMatrix(const RealMatrix& x, const QConfig& cfg, Rng& rng);

// (2t/r) * s - n_summands * t, element-wise. Correct whenever the true sum of
// the n_summands addends was below 2^32.
RealMatrix DequantizeSum(const QMatrix& s, uint64_t n_summands,
                         const QConfig& cfg);
double DequantizeScalar(uint32_t s, uint64_t n_summands, const QConfig& cfg);

}  // namespace vfedsec
