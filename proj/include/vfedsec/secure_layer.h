#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "vfedsec/common.h"
#include "vfedsec/qcode.h"
#include "vfedsec/wire.h"

namespace vfedsec {

struct ParticipantId {
  uint32_t value = 0;
  auto operator<=>(const ParticipantId&) const = default;
};

// C0 holds the labels; the server is not a pool member.
inline constexpr ParticipantId kActiveParty{0};
inline constexpr ParticipantId kServer{0xFFFFFFFFu};

using PublicKey = std::array<uint8_t, 32>;
using SharedSecret = std::array<uint8_t, 32>;

struct KeyPair {
  std::array<uint8_t, 32> private_value{};
  PublicKey public_value{};
};

// X25519 key pair from 32 bytes drawn from `rng`.
KeyPair GenKeypair(Rng& rng);

// Commutative: Derive(a, pub(b)) == Derive(b, pub(a)). Throws Error for a
// public value of the wrong length or a low-order point.
SharedSecret DeriveSharedSecret(const KeyPair& my,
                                std::span<const uint8_t> their_public);

enum class Phase : uint8_t {
  kForwardEmbedding = 0,
  kBackwardUpdate = 1,
  kEvalForward = 2,
};

// Identifies one noise stream. Both ends of a pair must use equal tags.
struct NoiseTag {
  uint32_t epoch = 0;
  uint32_t round = 0;
  Phase phase = Phase::kForwardEmbedding;
  // Tensor index within (round, phase).
  uint16_t slot = 0;
  size_t rows = 0;
  size_t cols = 0;
};

// Keyed ChaCha20 stream over the tag, expanded to tag.rows x tag.cols words.
QMatrix PrfStream(const SharedSecret& secret, const NoiseTag& tag);

// p if u > v, else -p (mod 2^32); pair_noise(u,v) + pair_noise(v,u) == 0.
QMatrix PairNoise(ParticipantId u, ParticipantId v, const SharedSecret& secret,
                  const NoiseTag& tag);

// Pairwise secrets among {C0} U group clients for one key epoch.
class PairPool {
 public:
  PairPool() = default;

  int group_id() const { return group_id_; }
  uint32_t epoch() const { return epoch_; }
  const std::vector<ParticipantId>& members() const { return members_; }
  bool Contains(ParticipantId u) const;
  const SharedSecret& Secret(ParticipantId u, ParticipantId v) const;

  // Derives every pair secret from each side's own private key and the other
  // side's public key; throws if the two derivations disagree.
  static PairPool Build(int group_id, std::vector<ParticipantId> members,
                        uint32_t epoch,
                        const std::map<ParticipantId, KeyPair>& keys);

  // Same secrets, restricted to `members` (a subset of this pool).
  PairPool Restrict(std::vector<ParticipantId> members) const;

 private:
  int group_id_ = 0;
  uint32_t epoch_ = 0;
  std::vector<ParticipantId> members_;
  std::map<std::pair<ParticipantId, ParticipantId>, SharedSecret> secrets_;
};

// Keypair for participant `u` in key epoch `epoch`, derived from the master
// seed so every party regenerates it independently.
KeyPair EpochKeypair(uint64_t master_seed, uint32_t epoch, ParticipantId u);

// Fresh key pairs for every member, secrets re-derived. Throws if new_epoch
// does not increase.
PairPool RotateEpoch(const PairPool& pool, uint32_t new_epoch,
                     uint64_t master_seed);

// Sum over v != u of PairNoise(u, v, ...).
QMatrix SelfNoise(ParticipantId u, const PairPool& pool, const NoiseTag& tag);

// (q + noise) mod 2^32.
QMatrix MaskTensor(const QMatrix& q, const QMatrix& noise);

// Modular sum of one masked tensor per pool member. Throws
// ProtocolError("incomplete pool") when pool_complete is false.
QMatrix UnmaskAggregate(std::span<const QMatrix> msgs, bool pool_complete);

// Sample-id channel. -------------------------------------------------------

struct IdAssignment {
  uint32_t sample_id = 0;
  uint32_t row = 0;
  friend bool operator==(const IdAssignment&, const IdAssignment&) = default;
};

inline constexpr uint32_t kNoSample = 0xFFFFFFFFu;
// u64 nonce counter + Poly1305 tag.
inline constexpr size_t kSealOverheadBytes = 8 + 16;

// AEAD (ChaCha20-Poly1305) under a key derived from `secret`. The nonce
// counter is carried in the first 8 bytes; callers must never reuse it with
// the same secret.
Bytes SealBytes(const SharedSecret& secret, uint64_t nonce_counter,
                std::span<const uint8_t> plaintext);
// Throws AuthError on a wrong key or tampered bytes.
Bytes OpenBytes(const SharedSecret& secret, std::span<const uint8_t> sealed);

// The id list is padded with kNoSample entries up to `pad_to` so the
// ciphertext length does not reveal how many rows a client owns.
Bytes SealIds(const SharedSecret& secret, uint64_t nonce_counter,
              std::span<const IdAssignment> ids, size_t pad_to = 0);
std::vector<IdAssignment> OpenIds(const SharedSecret& secret,
                                  std::span<const uint8_t> sealed);

}  // namespace vfedsec
