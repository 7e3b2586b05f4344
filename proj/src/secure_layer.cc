#include "vfedsec/secure_layer.h"

#include <algorithm>
#include <cstring>

#include <sodium.h>

namespace vfedsec {
namespace {

void EnsureSodium() {
  static const bool ok = sodium_init() >= 0;
  VFS_ENFORCE(ok, "libsodium initialization failed");
}

constexpr char kNoiseContext[crypto_kdf_CONTEXTBYTES] = {'v', 'f', 's', 'n',
                                                         'o', 'i', 's', 'e'};
constexpr char kSealContext[crypto_kdf_CONTEXTBYTES] = {'v', 'f', 's', 's',
                                                        'e', 'a', 'l', '_'};

std::array<uint8_t, 32> Subkey(const SharedSecret& secret, const char* ctx) {
  std::array<uint8_t, 32> out;
  crypto_kdf_derive_from_key(out.data(), out.size(), 1, ctx, secret.data());
  return out;
}

void PutLe(uint8_t* dst, uint64_t v, size_t n) {
  for (size_t i = 0; i < n; ++i) dst[i] = static_cast<uint8_t>(v >> (8 * i));
}

}  // namespace

KeyPair GenKeypair(Rng& rng) {
  EnsureSodium();
  KeyPair kp;
  for (size_t i = 0; i < kp.private_value.size(); i += 8) {
    const uint64_t w = rng();
    std::memcpy(kp.private_value.data() + i, &w, 8);
  }
  crypto_scalarmult_base(kp.public_value.data(), kp.private_value.data());
  return kp;
}

SharedSecret DeriveSharedSecret(const KeyPair& my,
                                std::span<const uint8_t> their_public) {
  EnsureSodium();
  VFS_ENFORCE(their_public.size() == crypto_scalarmult_BYTES,
              "malformed public element: expected ", crypto_scalarmult_BYTES,
              " bytes, got ", their_public.size());
  uint8_t point[crypto_scalarmult_BYTES];
  VFS_ENFORCE(crypto_scalarmult(point, my.private_value.data(),
                                their_public.data()) == 0,
              "malformed public element: low-order point");
  // Hash the shared point together with both public keys in canonical order.
  const uint8_t* a = my.public_value.data();
  const uint8_t* b = their_public.data();
  if (std::memcmp(a, b, 32) > 0) std::swap(a, b);
  crypto_generichash_state st;
  crypto_generichash_init(&st, nullptr, 0, 32);
  crypto_generichash_update(&st, point, sizeof(point));
  crypto_generichash_update(&st, a, 32);
  crypto_generichash_update(&st, b, 32);
  SharedSecret out;
  crypto_generichash_final(&st, out.data(), out.size());
  sodium_memzero(point, sizeof(point));
  return out;
}

QMatrix PrfStream(const SharedSecret& secret, const NoiseTag& tag) {
  EnsureSodium();
  const auto key = Subkey(secret, kNoiseContext);
  uint8_t nonce[crypto_stream_chacha20_ietf_NONCEBYTES] = {};
  PutLe(nonce, tag.round, 4);
  PutLe(nonce + 4, tag.epoch, 4);
  nonce[8] = static_cast<uint8_t>(tag.phase);
  PutLe(nonce + 10, tag.slot, 2);
  QMatrix out(tag.rows, tag.cols);
  auto words = out.values();
  if (!words.empty()) {
    crypto_stream_chacha20_ietf(reinterpret_cast<uint8_t*>(words.data()),
                                words.size() * sizeof(uint32_t), nonce,
                                key.data());
  }
  return out;
}

QMatrix PairNoise(ParticipantId u, ParticipantId v, const SharedSecret& secret,
                  const NoiseTag& tag) {
  VFS_ENFORCE(u != v, "pair_noise: u and v must differ (both ", u.value, ")");
  QMatrix p = PrfStream(secret, tag);
  return u > v ? p : Negate(std::move(p));
}

bool PairPool::Contains(ParticipantId u) const {
  return std::binary_search(members_.begin(), members_.end(), u);
}

const SharedSecret& PairPool::Secret(ParticipantId u, ParticipantId v) const {
  auto key = u < v ? std::make_pair(u, v) : std::make_pair(v, u);
  auto it = secrets_.find(key);
  VFS_ENFORCE(it != secrets_.end(), "no shared secret for pair (", u.value,
              ", ", v.value, ") in group ", group_id_);
  return it->second;
}

PairPool PairPool::Build(int group_id, std::vector<ParticipantId> members,
                         uint32_t epoch,
                         const std::map<ParticipantId, KeyPair>& keys) {
  std::sort(members.begin(), members.end());
  VFS_ENFORCE(std::adjacent_find(members.begin(), members.end()) ==
                  members.end(),
              "duplicate pool member in group ", group_id);
  VFS_ENFORCE(members.size() >= 2, "pool for group ", group_id,
              " needs at least two members");
  PairPool pool;
  pool.group_id_ = group_id;
  pool.epoch_ = epoch;
  pool.members_ = members;
  auto key_of = [&](ParticipantId p) -> const KeyPair& {
    auto it = keys.find(p);
    VFS_ENFORCE(it != keys.end(), "missing key pair for participant ", p.value);
    return it->second;
  };
  for (size_t i = 0; i < members.size(); ++i) {
    for (size_t j = i + 1; j < members.size(); ++j) {
      const KeyPair& ku = key_of(members[i]);
      const KeyPair& kv = key_of(members[j]);
      SharedSecret s_uv = DeriveSharedSecret(ku, kv.public_value);
      SharedSecret s_vu = DeriveSharedSecret(kv, ku.public_value);
      VFS_ENFORCE(s_uv == s_vu, "key agreement mismatch for pair (",
                  members[i].value, ", ", members[j].value, ")");
      pool.secrets_.emplace(std::make_pair(members[i], members[j]), s_uv);
    }
  }
  return pool;
}

PairPool PairPool::Restrict(std::vector<ParticipantId> members) const {
  std::sort(members.begin(), members.end());
  VFS_ENFORCE(members.size() >= 2, "sub-pool needs at least two members");
  PairPool sub;
  sub.group_id_ = group_id_;
  sub.epoch_ = epoch_;
  for (ParticipantId m : members)
    VFS_ENFORCE(Contains(m), "sub-pool member ", m.value, " not in group ",
                group_id_);
  sub.members_ = members;
  for (size_t i = 0; i < members.size(); ++i)
    for (size_t j = i + 1; j < members.size(); ++j)
      sub.secrets_.emplace(std::make_pair(members[i], members[j]),
                           Secret(members[i], members[j]));
  return sub;
}

KeyPair EpochKeypair(uint64_t master_seed, uint32_t epoch, ParticipantId u) {
  Rng rng = MakeRng(master_seed, Stream::kKeygen, {epoch, u.value});
  return GenKeypair(rng);
}

PairPool RotateEpoch(const PairPool& pool, uint32_t new_epoch,
                     uint64_t master_seed) {
  VFS_ENFORCE(new_epoch > pool.epoch(), "rotate_epoch: new epoch ", new_epoch,
              " must exceed current epoch ", pool.epoch());
  std::map<ParticipantId, KeyPair> keys;
  for (ParticipantId m : pool.members())
    keys.emplace(m, EpochKeypair(master_seed, new_epoch, m));
  return PairPool::Build(pool.group_id(), pool.members(), new_epoch, keys);
}

QMatrix SelfNoise(ParticipantId u, const PairPool& pool, const NoiseTag& tag) {
  VFS_ENFORCE(pool.Contains(u), "self_noise: participant ", u.value,
              " not in pool of group ", pool.group_id());
  QMatrix acc(tag.rows, tag.cols);
  for (ParticipantId v : pool.members()) {
    if (v == u) continue;
    acc += PairNoise(u, v, pool.Secret(u, v), tag);
  }
  return acc;
}

QMatrix MaskTensor(const QMatrix& q, const QMatrix& noise) {
  VFS_ENFORCE(q.SameShape(noise), "mask_tensor: shape mismatch ", q.rows(),
              "x", q.cols(), " vs ", noise.rows(), "x", noise.cols());
  return q + noise;
}

QMatrix UnmaskAggregate(std::span<const QMatrix> msgs, bool pool_complete) {
  VFS_ENFORCE_T(ProtocolError, pool_complete, "incomplete pool");
  VFS_ENFORCE_T(ProtocolError, !msgs.empty(), "unmask_aggregate: no messages");
  QMatrix acc = msgs.front();
  for (size_t i = 1; i < msgs.size(); ++i) acc += msgs[i];
  return acc;
}

Bytes SealBytes(const SharedSecret& secret, uint64_t nonce_counter,
                std::span<const uint8_t> plaintext) {
  EnsureSodium();
  const auto key = Subkey(secret, kSealContext);
  uint8_t nonce[crypto_aead_chacha20poly1305_IETF_NPUBBYTES] = {};
  PutLe(nonce, nonce_counter, 8);
  Bytes out(8 + plaintext.size() + crypto_aead_chacha20poly1305_IETF_ABYTES);
  PutLe(out.data(), nonce_counter, 8);
  unsigned long long clen = 0;
  crypto_aead_chacha20poly1305_ietf_encrypt(out.data() + 8, &clen,
                                            plaintext.data(), plaintext.size(),
                                            nullptr, 0, nullptr, nonce,
                                            key.data());
  out.resize(8 + clen);
  return out;
}

Bytes OpenBytes(const SharedSecret& secret, std::span<const uint8_t> sealed) {
  EnsureSodium();
  VFS_ENFORCE_T(AuthError, sealed.size() >= kSealOverheadBytes,
                "authentication failure: ciphertext too short");
  const auto key = Subkey(secret, kSealContext);
  uint8_t nonce[crypto_aead_chacha20poly1305_IETF_NPUBBYTES] = {};
  std::memcpy(nonce, sealed.data(), 8);
  Bytes out(sealed.size() - kSealOverheadBytes);
  unsigned long long mlen = 0;
  const int rc = crypto_aead_chacha20poly1305_ietf_decrypt(
      out.data(), &mlen, nullptr, sealed.data() + 8, sealed.size() - 8,
      nullptr, 0, nonce, key.data());
  VFS_ENFORCE_T(AuthError, rc == 0, "authentication failure");
  out.resize(mlen);
  return out;
}

Bytes SealIds(const SharedSecret& secret, uint64_t nonce_counter,
              std::span<const IdAssignment> ids, size_t pad_to) {
  const size_t n = std::max(ids.size(), pad_to);
  ByteWriter w;
  w.U32(static_cast<uint32_t>(n));
  for (const auto& a : ids) {
    VFS_ENFORCE(a.sample_id != kNoSample, "sample id ", kNoSample,
                " is reserved");
    w.U32(a.sample_id);
    w.U32(a.row);
  }
  for (size_t i = ids.size(); i < n; ++i) {
    w.U32(kNoSample);
    w.U32(0);
  }
  return SealBytes(secret, nonce_counter, w.bytes());
}

std::vector<IdAssignment> OpenIds(const SharedSecret& secret,
                                  std::span<const uint8_t> sealed) {
  const Bytes plain = OpenBytes(secret, sealed);
  ByteReader r(plain);
  const uint32_t n = r.U32();
  VFS_ENFORCE(r.remaining() == uint64_t{n} * 8, "malformed id list");
  std::vector<IdAssignment> out;
  for (uint32_t i = 0; i < n; ++i) {
    IdAssignment a{r.U32(), r.U32()};
    if (a.sample_id != kNoSample) out.push_back(a);
  }
  return out;
}

}  // namespace vfedsec
