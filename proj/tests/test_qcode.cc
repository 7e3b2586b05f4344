#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.h"
#include "vfedsec/qcode.h"
#include "vfedsec/wire.h"

namespace vfedsec {
namespace {

constexpr uint32_t kR = 1u << 27;

TEST(QuantizeScalar, MidpointMapsToHalfRange) {
  Rng rng(1);
  EXPECT_EQ(QuantizeScalar(0.0, QConfig{}, rng), kR / 2);
  EXPECT_EQ(QuantizeScalar(0.0, QConfig{}, rng), 67108864u);
}

TEST(QuantizeScalar, UpperClipBoundMapsToRange) {
  Rng rng(1);
  EXPECT_EQ(QuantizeScalar(4.0, QConfig{}, rng), 134217728u);
  EXPECT_EQ(QuantizeScalar(1e9, QConfig{}, rng), kR);
}

TEST(QuantizeScalar, GridPointIsExactAndDrawsNothing) {
  const long double exact = oracle::ScaledValue(1.0, 4.0, kR);
  ASSERT_EQ(exact, std::floor(exact));
  EXPECT_EQ(static_cast<uint32_t>(exact), 83886080u);
  Rng a(9), b(9);
  EXPECT_EQ(QuantizeScalar(1.0, QConfig{}, a), 83886080u);
  EXPECT_EQ(a(), b());
}

TEST(QuantizeScalar, BelowRangeClipsToZero) {
  Rng rng(1);
  EXPECT_EQ(QuantizeScalar(-5.0, QConfig{}, rng), 0u);
}

TEST(QuantizeScalar, NonFiniteInputRejected) {
  Rng rng(1);
  for (double x : {std::numeric_limits<double>::quiet_NaN(),
                   std::numeric_limits<double>::infinity(),
                   -std::numeric_limits<double>::infinity()}) {
    try {
      QuantizeScalar(x, QConfig{}, rng);
      FAIL() << "accepted " << x;
    } catch (const Error& e) {
      EXPECT_STREQ(e.what(), "non-finite input");
    }
  }
}

TEST(QuantizeScalar, ResultIsFloorOrCeilOfScaledValue) {
  Rng rng(3), xs(4);
  for (int i = 0; i < 20000; ++i) {
    const double x = 10 * Uniform01(xs) - 5;
    const long double v = oracle::ScaledValue(x, 4.0, kR);
    const uint32_t q = QuantizeScalar(x, QConfig{}, rng);
    EXPECT_TRUE(q == std::floor(v) || q == std::ceil(v)) << x;
    EXPECT_LE(q, kR);
  }
}

TEST(QuantizeMatrix, ComposesScalarCases) {
  Rng rng(1);
  RealMatrix x(2, 1);
  x << 0.0, 4.0;
  const QMatrix q = QuantizeMatrix(x, QConfig{}, rng);
  EXPECT_EQ(q.rows(), 2u);
  EXPECT_EQ(q.cols(), 1u);
  EXPECT_EQ(q(0, 0), 67108864u);
  EXPECT_EQ(q(1, 0), 134217728u);
}

TEST(QuantizeMatrix, ZeroMatrixIsHalfRangeEverywhere) {
  Rng rng(1);
  const QMatrix q = QuantizeMatrix(RealMatrix::Zero(16, 5), QConfig{}, rng);
  for (uint32_t v : q.values()) EXPECT_EQ(v, kR / 2);
}

TEST(QuantizeMatrix, RoundTripWithinOneStep) {
  Rng rng(5), xs(6);
  const QConfig cfg;
  const RealMatrix x = oracle::RandomMatrix(32, 16, xs, 4.0);
  const RealMatrix back = DequantizeSum(QuantizeMatrix(x, cfg, rng), 1, cfg);
  for (Eigen::Index i = 0; i < x.size(); ++i)
    EXPECT_LE(std::abs(back.data()[i] - x.data()[i]), 2 * 4.0 / kR);
}

// Property: matrix rounding picks floor or ceil and is unbiased.
TEST(QcodeProperty, MatrixRoundingFloorCeilUnbiased) {
  Rng rng(7), xs(8);
  const QConfig cfg;
  const RealMatrix x = oracle::RandomMatrix(200, 100, xs, 4.0);
  const QMatrix q = QuantizeMatrix(x, cfg, rng);
  double sum = 0, sumsq = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const long double v = oracle::ScaledValue(x.data()[i], 4.0, kR);
    const uint32_t got = q.values()[i];
    ASSERT_TRUE(got == std::floor(v) || got == std::ceil(v)) << x.data()[i];
    const double e = DequantizeScalar(got, 1, cfg) - x.data()[i];
    sum += e;
    sumsq += e * e;
  }
  const double n = static_cast<double>(x.size());
  const double mean = sum / n;
  EXPECT_LE(std::abs(mean), 4 * std::sqrt((sumsq / n - mean * mean) / n));
  Rng again(7);
  EXPECT_EQ(QuantizeMatrix(x, cfg, again), q);
  EXPECT_NE(QuantizeMatrix(x, cfg, again), q);
}

TEST(QuantizeMatrix, RejectsNonFiniteEntry) {
  Rng rng(1);
  RealMatrix x = RealMatrix::Zero(2, 2);
  x(1, 1) = std::nan("");
  EXPECT_THROW(QuantizeMatrix(x, QConfig{}, rng), Error);
}

TEST(DequantizeSum, Examples) {
  const QConfig cfg;
  EXPECT_EQ(DequantizeScalar(67108864u, 1, cfg), 0.0);
  EXPECT_EQ(DequantizeScalar(150994944u, 2, cfg), 1.0);
  EXPECT_EQ(150994944u, 83886080u + 67108864u);
  EXPECT_EQ(DequantizeScalar(0u, 1, cfg), -4.0);
  QMatrix s(1, 3);
  s(0, 0) = 67108864u;
  s(0, 1) = 150994944u;
  const RealMatrix d = DequantizeSum(s, 2, cfg);
  EXPECT_EQ(d(0, 0), -4.0);
  EXPECT_EQ(d(0, 1), 1.0);
  EXPECT_EQ(d(0, 2), -8.0);
}

TEST(DequantizeSum, ZeroSummandsRejected) {
  EXPECT_THROW(DequantizeSum(QMatrix(1, 1), 0, QConfig{}), Error);
}

TEST(DequantizeSum, MatchesLongDoubleOracle) {
  Rng rng(11);
  const QConfig cfg;
  for (int i = 0; i < 1000; ++i) {
    const uint64_t n = 1 + rng() % 31;
    const uint32_t s = static_cast<uint32_t>(rng() % (n * kR + 1));
    EXPECT_EQ(static_cast<long double>(DequantizeScalar(s, n, cfg)),
              oracle::Dequant(s, n, 4.0, kR));
  }
}

// Property: sum-linearity and padding neutrality hold exactly.
TEST(QcodeProperty, SumLinearityExact) {
  Rng rng(21), xs(22);
  const QConfig cfg;
  for (int trial = 0; trial < 500; ++trial) {
    const size_t n = 1 + xs() % 31;
    uint32_t sum = 0;
    double separate = 0;
    for (size_t k = 0; k < n; ++k) {
      const uint32_t q = QuantizeScalar(8 * Uniform01(xs) - 4, cfg, rng);
      sum += q;
      separate += DequantizeScalar(q, 1, cfg);
    }
    EXPECT_EQ(DequantizeScalar(sum, n, cfg), separate);
  }
}

TEST(QcodeProperty, PaddingNeutrality) {
  Rng rng(31), xs(32);
  const QConfig cfg;
  for (int trial = 0; trial < 500; ++trial) {
    const uint32_t qa = QuantizeScalar(8 * Uniform01(xs) - 4, cfg, rng);
    const size_t n = 1 + xs() % 31;
    const uint32_t s = qa + static_cast<uint32_t>(n - 1) * (kR / 2);
    EXPECT_EQ(DequantizeScalar(s, n, cfg), DequantizeScalar(qa, 1, cfg));
  }
}

TEST(QcodeProperty, StochasticRoundingUnbiased) {
  const QConfig cfg;
  Rng rng(41);
  for (double x : {0.3, -1.7, 3.99999}) {
    const int n = 100000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
      const double e = DequantizeScalar(QuantizeScalar(x, cfg, rng), 1, cfg) - x;
      sum += e;
      sumsq += e * e;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sumsq / n - mean * mean) / n);
    EXPECT_LE(std::abs(mean), 4 * se) << x;
  }
}

TEST(QConfig, HeadroomAndValidation) {
  QConfig c;
  EXPECT_EQ(c.MaxSummands(), 31u);
  EXPECT_NO_THROW(c.Validate(31));
  EXPECT_THROW(c.Validate(32), ConfigError);
  QConfig bad_r;
  bad_r.r = 3u << 20;
  EXPECT_THROW(bad_r.Validate(), ConfigError);
  QConfig bad_t;
  bad_t.t = 0;
  EXPECT_THROW(bad_t.Validate(), ConfigError);
  try {
    bad_t.Validate();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("qcode.t"), std::string::npos);
  }
  QConfig small;
  small.r = 1u << 20;
  EXPECT_EQ(small.MaxSummands(), 4095u);
  EXPECT_DOUBLE_EQ(c.Step(), 0x1.0p-24);
  EXPECT_EQ(c.ForUpdates().t, c.t_update);
}

TEST(QMatrix, WrapsModulo32Bits) {
  QMatrix a(1, 2, {0xFFFFFFFFu, 5u});
  QMatrix b(1, 2, {1u, 7u});
  const QMatrix s = a + b;
  EXPECT_EQ(s(0, 0), 0u);
  EXPECT_EQ(s(0, 1), 12u);
  const QMatrix z = a + Negate(a);
  for (uint32_t v : z.values()) EXPECT_EQ(v, 0u);
  EXPECT_THROW(a += QMatrix(2, 1), Error);
  EXPECT_THROW(QMatrix(2, 2, std::vector<uint32_t>{1, 2, 3}), Error);
}

TEST(Wire, QMatrixRoundTripLittleEndian) {
  QMatrix m(2, 3, {1, 2, 3, 0xA1B2C3D4u, 5, 6});
  const Bytes b = EncodeQMatrix(m);
  ASSERT_EQ(b.size(), 8u + 6 * 4);
  EXPECT_EQ(b[0], 2);
  EXPECT_EQ(b[4], 3);
  EXPECT_EQ(b[8 + 3 * 4], 0xD4);
  EXPECT_EQ(b[8 + 3 * 4 + 3], 0xA1);
  EXPECT_EQ(DecodeQMatrix(b), m);
  Bytes cut(b.begin(), b.end() - 1);
  EXPECT_THROW(DecodeQMatrix(cut), Error);
}

TEST(Wire, EnvelopeRoundTrip) {
  Envelope e{MsgKind::kMaskedUpdate, 3, 0xFFFFFFFFu, {9, 8, 7}};
  const Bytes b = EncodeEnvelope(e);
  EXPECT_EQ(b.size(), e.WireSize());
  EXPECT_EQ(b.size(), kEnvelopeHeaderBytes + 3);
  const Envelope d = DecodeEnvelope(b);
  EXPECT_EQ(d.kind, e.kind);
  EXPECT_EQ(d.from, 3u);
  EXPECT_EQ(d.to, 0xFFFFFFFFu);
  EXPECT_EQ(d.payload, e.payload);
  EXPECT_EQ(MsgKindName(MsgKind::kGradientSegment), "GradientSegment");
}

TEST(Wire, RealMatrixF32SameSizeAsQMatrix) {
  RealMatrix m(4, 3);
  m.setConstant(0.25);
  ByteWriter w;
  WriteRealMatrixF32(w, m);
  EXPECT_EQ(w.bytes().size(), EncodeQMatrix(QMatrix(4, 3)).size());
  ByteReader r(w.bytes());
  EXPECT_EQ(ReadRealMatrixF32(r), m);
}

}  // namespace
}  // namespace vfedsec
