#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "vfedsec/common.h"
#include "vfedsec/qcode.h"

namespace vfedsec {

using Bytes = std::vector<uint8_t>;

// Little-endian append-only writer.
class ByteWriter {
 public:
  void U8(uint8_t v) { buf_.push_back(v); }
  void U32(uint32_t v);
  void U64(uint64_t v);
  void F32(float v);
  void F64(double v);
  void Raw(std::span<const uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  // u32 length prefix followed by the bytes.
  void Blob(std::span<const uint8_t> b);

  const Bytes& bytes() const { return buf_; }
  Bytes Take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

// Bounds-checked little-endian reader; throws Error on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> b) : buf_(b) {}

  uint8_t U8();
  uint32_t U32();
  uint64_t U64();
  float F32();
  double F64();
  std::span<const uint8_t> Raw(size_t n);
  Bytes Blob();

  size_t remaining() const { return buf_.size() - pos_; }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void Need(size_t n) const;
  std::span<const uint8_t> buf_;
  size_t pos_ = 0;
};

// (rows, cols) as u32 then rows*cols u32 words.
void WriteQMatrix(ByteWriter& w, const QMatrix& m);
QMatrix ReadQMatrix(ByteReader& r);
Bytes EncodeQMatrix(const QMatrix& m);
QMatrix DecodeQMatrix(std::span<const uint8_t> b);

// Unsecured payloads: same framing, float32 elements.
void WriteRealMatrixF32(ByteWriter& w, const RealMatrix& m);
RealMatrix ReadRealMatrixF32(ByteReader& r);

// Full-precision framing used by checkpoints and parameter broadcast.
void WriteRealMatrixF64(ByteWriter& w, const RealMatrix& m);
RealMatrix ReadRealMatrixF64(ByteReader& r);

// Wire message catalogue.
enum class MsgKind : uint8_t {
  kBatchAssignment = 1,
  kMaskedEmbedding = 2,
  kLabelVector = 3,
  kGradientSegment = 4,
  kMaskedUpdate = 5,
  kBottomParams = 6,
  kPublicKeyAnnouncement = 7,
};

std::string_view MsgKindName(MsgKind k);

// Envelope header: u32 frame length, u8 kind, u32 from, u32 to.
inline constexpr size_t kEnvelopeHeaderBytes = 4 + 1 + 4 + 4;

struct Envelope {
  MsgKind kind;
  uint32_t from;
  uint32_t to;
  Bytes payload;

  size_t WireSize() const { return kEnvelopeHeaderBytes + payload.size(); }
};

Bytes EncodeEnvelope(const Envelope& e);
Envelope DecodeEnvelope(std::span<const uint8_t> b);

}  // namespace vfedsec
