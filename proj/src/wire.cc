#include "vfedsec/wire.h"

#include <bit>
#include <cstring>

namespace vfedsec {

static_assert(std::endian::native == std::endian::little,
              "wire encoding assumes a little-endian host");

void ByteWriter::U32(uint32_t v) {
  uint8_t b[4];
  std::memcpy(b, &v, 4);
  buf_.insert(buf_.end(), b, b + 4);
}

void ByteWriter::U64(uint64_t v) {
  uint8_t b[8];
  std::memcpy(b, &v, 8);
  buf_.insert(buf_.end(), b, b + 8);
}

void ByteWriter::F32(float v) { U32(std::bit_cast<uint32_t>(v)); }
void ByteWriter::F64(double v) { U64(std::bit_cast<uint64_t>(v)); }

void ByteWriter::Blob(std::span<const uint8_t> b) {
  U32(static_cast<uint32_t>(b.size()));
  Raw(b);
}

void ByteReader::Need(size_t n) const {
  VFS_ENFORCE(remaining() >= n, "truncated message: need ", n, " bytes, have ",
              remaining());
}

uint8_t ByteReader::U8() {
  Need(1);
  return buf_[pos_++];
}

uint32_t ByteReader::U32() {
  Need(4);
  uint32_t v;
  std::memcpy(&v, buf_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

uint64_t ByteReader::U64() {
  Need(8);
  uint64_t v;
  std::memcpy(&v, buf_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

float ByteReader::F32() { return std::bit_cast<float>(U32()); }
double ByteReader::F64() { return std::bit_cast<double>(U64()); }

std::span<const uint8_t> ByteReader::Raw(size_t n) {
  Need(n);
  auto s = buf_.subspan(pos_, n);
  pos_ += n;
  return s;
}

Bytes ByteReader::Blob() {
  const uint32_t n = U32();
  auto s = Raw(n);
  return Bytes(s.begin(), s.end());
}

void WriteQMatrix(ByteWriter& w, const QMatrix& m) {
  w.U32(static_cast<uint32_t>(m.rows()));
  w.U32(static_cast<uint32_t>(m.cols()));
  for (uint32_t v : m.values()) w.U32(v);
}

QMatrix ReadQMatrix(ByteReader& r) {
  const uint32_t rows = r.U32();
  const uint32_t cols = r.U32();
  const uint64_t n = uint64_t{rows} * cols;
  VFS_ENFORCE(r.remaining() >= n * 4, "QMatrix payload truncated");
  std::vector<uint32_t> data(n);
  for (auto& v : data) v = r.U32();
  return QMatrix(rows, cols, std::move(data));
}

Bytes EncodeQMatrix(const QMatrix& m) {
  ByteWriter w;
  WriteQMatrix(w, m);
  return w.Take();
}

QMatrix DecodeQMatrix(std::span<const uint8_t> b) {
  ByteReader r(b);
  QMatrix m = ReadQMatrix(r);
  VFS_ENFORCE(r.done(), "trailing bytes after QMatrix");
  return m;
}

void WriteRealMatrixF32(ByteWriter& w, const RealMatrix& m) {
  w.U32(static_cast<uint32_t>(m.rows()));
  w.U32(static_cast<uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i)
    w.F32(static_cast<float>(m.data()[i]));
}

RealMatrix ReadRealMatrixF32(ByteReader& r) {
  const uint32_t rows = r.U32();
  const uint32_t cols = r.U32();
  VFS_ENFORCE(r.remaining() >= uint64_t{rows} * cols * 4,
              "float tensor payload truncated");
  RealMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.F32();
  return m;
}

void WriteRealMatrixF64(ByteWriter& w, const RealMatrix& m) {
  w.U32(static_cast<uint32_t>(m.rows()));
  w.U32(static_cast<uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.F64(m.data()[i]);
}

RealMatrix ReadRealMatrixF64(ByteReader& r) {
  const uint32_t rows = r.U32();
  const uint32_t cols = r.U32();
  VFS_ENFORCE(r.remaining() >= uint64_t{rows} * cols * 8,
              "double tensor payload truncated");
  RealMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.F64();
  return m;
}

std::string_view MsgKindName(MsgKind k) {
  switch (k) {
    case MsgKind::kBatchAssignment: return "BatchAssignment";
    case MsgKind::kMaskedEmbedding: return "MaskedEmbedding";
    case MsgKind::kLabelVector: return "LabelVector";
    case MsgKind::kGradientSegment: return "GradientSegment";
    case MsgKind::kMaskedUpdate: return "MaskedUpdate";
    case MsgKind::kBottomParams: return "BottomParams";
    case MsgKind::kPublicKeyAnnouncement: return "PublicKeyAnnouncement";
  }
  return "Unknown";
}

Bytes EncodeEnvelope(const Envelope& e) {
  ByteWriter w;
  w.U32(static_cast<uint32_t>(e.WireSize()));
  w.U8(static_cast<uint8_t>(e.kind));
  w.U32(e.from);
  w.U32(e.to);
  w.Raw(e.payload);
  return w.Take();
}

Envelope DecodeEnvelope(std::span<const uint8_t> b) {
  ByteReader r(b);
  const uint32_t len = r.U32();
  VFS_ENFORCE(len == b.size(), "envelope length ", len, " != frame size ",
              b.size());
  Envelope e;
  const uint8_t kind = r.U8();
  VFS_ENFORCE(kind >= 1 && kind <= 7, "unknown message kind ", int{kind});
  e.kind = static_cast<MsgKind>(kind);
  e.from = r.U32();
  e.to = r.U32();
  auto rest = r.Raw(r.remaining());
  e.payload.assign(rest.begin(), rest.end());
  return e;
}

}  // namespace vfedsec
