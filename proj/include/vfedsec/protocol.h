#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "vfedsec/common.h"
#include "vfedsec/datahub.h"
#include "vfedsec/ledger.h"
#include "vfedsec/neuralnet.h"
#include "vfedsec/qcode.h"
#include "vfedsec/secure_layer.h"
#include "vfedsec/wire.h"

namespace vfedsec {

// Topology ---------------------------------------------------------------

struct GroupTopology {
  int group_id = 0;  // 1-based
  std::vector<ParticipantId> clients;
  std::vector<size_t> cols;  // encoded feature columns
  size_t width = 0;          // embedding segment width
  size_t offset = 0;         // first embedding column of the segment
  // Per client, sorted sample ids it holds.
  std::vector<std::vector<uint32_t>> train_shards;
  std::vector<std::vector<uint32_t>> test_shards;

  size_t size() const { return clients.size(); }
};

struct Topology {
  std::vector<size_t> active_cols;
  std::vector<GroupTopology> groups;

  size_t embedding_width() const;
  std::vector<ParticipantId> PassiveClients() const;
  // Index into `groups`, or -1 for a non-member.
  int GroupIndexOf(ParticipantId u) const;
  // Position of `u` within its group.
  size_t ClientSlot(ParticipantId u) const;

  // Throws ConfigError unless feature columns are disjoint and cover
  // [0, n_cols), shards are disjoint and cover each split, widths are
  // positive, and every group fits the quantization headroom.
  void Validate(size_t n_cols, size_t train_rows, size_t test_rows,
                const QConfig& q) const;

  // Client ids are assigned 1, 2, ... in group order.
  static Topology Build(const PartitionViews& train, const PartitionViews& test,
                        const std::vector<size_t>& widths);
};

// Hidden-layer sizes; input and output widths come from the topology.
struct ModelLayout {
  std::vector<size_t> active_hidden;
  std::vector<size_t> group_hidden;
  std::vector<size_t> head_hidden;
  size_t outputs = 1;
};

// f0 is biased, group bottoms are unbiased, head is biased.
SplitModel InitSplitModel(const Topology& topo, const ModelLayout& layout,
                          uint64_t master_seed);

// Configuration ----------------------------------------------------------

struct ProtocolConfig {
  QConfig q;
  size_t batch = 256;
  double lr = 0.01;
  // Keys are regenerated every `rotation_interval` rounds.
  uint32_t rotation_interval = 5;
  // false: unsecured split learning with equal-shape float32 payloads.
  bool secure = true;
  uint64_t master_seed = 0;
  Task task = Task::kBinary;
};

// Client-local data: sorted sample ids and their feature rows.
struct LocalData {
  std::vector<uint32_t> ids;
  RealMatrix x;

  // Row of `id` in x, or -1.
  long Find(uint32_t id) const;
  static LocalData Gather(const Table& t, std::span<const uint32_t> ids,
                          std::span<const size_t> cols);
};

// Batch selection --------------------------------------------------------

struct BatchPlan {
  uint32_t round = 0;
  std::vector<uint32_t> sample_ids;  // batch row -> sample id
  // Per passive client, its (sample id, row) pairs: sealed under the C0
  // channel secret in secure mode, plain otherwise.
  std::map<ParticipantId, Bytes> assignments;
};

// Secrets C0 shares with each passive client.
using ChannelSecrets = std::map<ParticipantId, SharedSecret>;

// B distinct ids drawn uniformly from [0, n_samples). Sealed lists are
// padded to B entries.
BatchPlan SelectBatch(uint32_t round, size_t n_samples, size_t batch,
                      const Topology& topo, const ChannelSecrets* secrets,
                      uint64_t nonce, Rng& rng);

// Per-client id lists, sealed with `secrets` (padded to pad_to entries) or
// plain-encoded when secrets is null.
std::map<ParticipantId, Bytes> SealAssignments(
    const std::map<ParticipantId, std::vector<IdAssignment>>& owned,
    const ChannelSecrets* secrets, uint64_t nonce, size_t pad_to);

// Ownership split of given batch rows (used for both train and eval).
std::map<ParticipantId, std::vector<IdAssignment>> AssignRows(
    std::span<const uint32_t> sample_ids, const Topology& topo, bool test_split);

Bytes EncodePlainIds(std::span<const IdAssignment> ids);
std::vector<IdAssignment> DecodePlainIds(std::span<const uint8_t> b);

// Forward ----------------------------------------------------------------

struct ClientCache {
  std::vector<IdAssignment> owned;  // rows this client filled
  DenseStack::Cache bottom;
};

// f(x) on owned rows, zeros on the rest; B x f.out_dim(). Throws
// ProtocolError on a row >= B or an id the client does not hold.
RealMatrix ClientEmbedding(const DenseStack& f, const LocalData& data,
                           std::span<const IdAssignment> owned, size_t batch,
                           ClientCache* cache);

// Quantizes every row (unowned rows become q(0)) and adds the client's
// self noise for `pool`.
QMatrix ClientForward(ParticipantId u, const DenseStack& f, const LocalData& data,
                      std::span<const IdAssignment> owned, size_t batch,
                      const QConfig& q, const PairPool& pool,
                      const NoiseTag& tag, Rng& rounding, ClientCache* cache);

// Quantized f0(x0) with segment i masked by C0's self noise for pools[i].
// Each tag differs only in cols (= segment width).
QMatrix ActiveForward(const DenseStack& f0, const RealMatrix& x0,
                      const Topology& topo, const QConfig& q,
                      std::span<const PairPool> pools, const NoiseTag& tag,
                      Rng& rounding, DenseStack::Cache* cache);

struct AggregatedEmbedding {
  RealMatrix h;                    // B x H; absent columns are zero
  std::vector<bool> present_cols;  // width H
  std::vector<bool> group_present;
};

// Group i (not dropped): sum of C0's segment i and all K_i client tensors,
// dequantized with K_i + 1 summands. client_msgs[i][k] is null when client k
// of group i sent nothing. Throws ProtocolError on a partial non-dropped
// group and "no surviving segments" when every group is dropped.
AggregatedEmbedding ServerAggregateForward(
    const QMatrix& active_msg,
    const std::vector<std::vector<const QMatrix*>>& client_msgs,
    const Topology& topo, const std::vector<bool>& dropped, const QConfig& q);

// Same contract over real-valued payloads.
AggregatedEmbedding ServerAggregatePlain(
    const RealMatrix& active_msg,
    const std::vector<std::vector<const RealMatrix*>>& client_msgs,
    const Topology& topo, const std::vector<bool>& dropped);

// Groups with any missing message.
std::vector<bool> DetectDroppedGroups(
    const std::vector<std::vector<bool>>& received);

RealMatrix PadAndPredict(TopModel& top, const AggregatedEmbedding& emb,
                         bool training, TopModel::Cache* cache);

struct ServerBackwardResult {
  double loss = 0;
  RealMatrix logits;
  RealMatrix d_embedding;  // B x H
};

// Loss, top-model SGD step, and d(loss)/d(h).
ServerBackwardResult ServerBackward(TopModel& top, const TopModel::Cache& cache,
                                    const RealMatrix& logits,
                                    std::span<const int> labels, Task task,
                                    double lr);

// Columns of group segment `g`.
RealMatrix SegmentOf(const RealMatrix& m, const Topology& topo, size_t g);

// Backward ---------------------------------------------------------------

// -lr * grad of f over the client's owned rows as a 1 x P row; zero when
// it owns no rows.
RealMatrix ClientLocalUpdate(const DenseStack& f, const ClientCache& cache,
                             const RealMatrix& d_segment, double lr);

// Quantized with t_update and masked with the backward sub-pool noise.
QMatrix MaskUpdate(ParticipantId u, const RealMatrix& delta, const QConfig& q,
                   const PairPool& backward_pool, const NoiseTag& tag,
                   Rng& rounding);

// Returns false and leaves `bottom` untouched when any message is missing.
bool ServerApplyGroupUpdate(DenseStack& bottom,
                            const std::vector<const QMatrix*>& msgs,
                            const QConfig& q);
bool ServerApplyGroupUpdatePlain(DenseStack& bottom,
                                 const std::vector<const RealMatrix*>& msgs);

// Session ----------------------------------------------------------------

enum class RoundMode { kClean, kPad, kDiscard };
std::string_view RoundModeName(RoundMode m);

struct RoundOutcome {
  uint32_t round = 0;
  RoundMode mode = RoundMode::kClean;
  std::vector<int> dropped_groups;  // group ids
  std::vector<ParticipantId> dropped_clients;
  double loss = 0;
  double batch_metric = 0;  // NaN when undefined on this batch
  bool served = true;
};

struct EvalResult {
  double metric = 0;  // AUC (binary) or accuracy
  double loss = 0;
  size_t rows = 0;
};

// Meters and optionally records every envelope.
class Transport {
 public:
  explicit Transport(OverheadLedger* ledger) : ledger_(ledger) {}

  // The whole wire size goes to `tag`, except `overhead` bytes that go to
  // `overhead_tag`. Returns the envelope decoded from its own encoding.
  Envelope Send(Envelope e, CostTag tag, size_t overhead = 0,
                CostTag overhead_tag = CostTag::kSealIds);

  void set_capture(bool on) { capture_ = on; }
  const std::vector<Envelope>& captured() const { return captured_; }
  void clear_captured() { captured_.clear(); }

 private:
  OverheadLedger* ledger_;
  bool capture_ = false;
  std::vector<Envelope> captured_;
};

// All participants of one deployment driven in a fixed sequential order:
// C0, then clients by id, then the server, within each phase.
class Session {
 public:
  Session(Topology topo, const Table& train, const Table& test, SplitModel init,
          ProtocolConfig cfg, OverheadLedger* ledger = nullptr);

  // One training round; clients in `absent` send nothing. Groups with an
  // absent member are padded. Throws ProtocolError("no surviving segments")
  // when every group is absent.
  RoundOutcome TrainRound(uint32_t round, const std::set<ParticipantId>& absent);

  // Forward-only pass over the test split.
  EvalResult Evaluate();

  // Every participant's parameters, including each client's own copy.
  Bytes StateBytes() const;
  // Consolidated model; group bottoms come from the lowest-id member.
  SplitModel Model() const;

  uint32_t epoch() const { return epoch_; }
  bool keys_ready() const { return keys_ready_; }
  const Topology& topology() const { return topo_; }
  const ProtocolConfig& config() const { return cfg_; }
  Transport& transport() { return transport_; }

 private:
  struct Client {
    ParticipantId id;
    size_t group = 0;
    DenseStack bottom;
    LocalData train;
    LocalData test;
    ClientCache cache;
    SharedSecret c0_secret{};
    SharedSecret server_secret{};
  };

  void EnsureKeys(uint32_t round);
  uint32_t Uid(ParticipantId u) const { return u.value; }
  Rng RoundingRng(uint32_t round, ParticipantId u, Phase phase, uint16_t slot) const;

  // Forward of `ids` through every party; returns the server's aggregate.
  AggregatedEmbedding ForwardPass(Phase phase, uint16_t slot,
                                  const BatchPlan& plan,
                                  const std::set<ParticipantId>& absent,
                                  bool test_split, DenseStack::Cache* active_cache,
                                  std::vector<int>* labels_at_server);

  Topology topo_;
  ProtocolConfig cfg_;
  OverheadLedger* ledger_;
  Transport transport_;

  // C0
  DenseStack active_bottom_;
  RealMatrix active_train_x_;
  RealMatrix active_test_x_;
  std::vector<int> train_labels_;
  std::vector<int> test_labels_;
  ChannelSecrets c0_secrets_;

  std::vector<Client> clients_;

  // Server
  TopModel top_;
  std::map<size_t, DenseStack> server_bottoms_;  // multi-client groups
  KeyPair server_keys_;

  // Key material of the current epoch.
  bool keys_ready_ = false;
  uint32_t epoch_ = 0;
  std::vector<PairPool> pools_;
  std::vector<PairPool> backward_pools_;  // empty pool for singleton groups
  SharedSecret c0_server_secret_{};
  uint32_t eval_counter_ = 0;
};

}  // namespace vfedsec
