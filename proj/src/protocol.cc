#include "vfedsec/protocol.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace vfedsec {

namespace {

enum SealKind : uint8_t { kTrainIds = 1, kGradient = 2, kEvalIds = 3 };

// Nonce counter unique per (secret, message) within a key epoch.
uint64_t SealNonce(uint64_t round, SealKind kind, uint16_t slot) {
  return (round << 24) | (uint64_t{kind} << 16) | slot;
}

QMatrix QSegment(const QMatrix& m, size_t offset, size_t width) {
  QMatrix out(m.rows(), width);
  for (size_t r = 0; r < m.rows(); ++r)
    for (size_t c = 0; c < width; ++c) out(r, c) = m(r, offset + c);
  return out;
}

RealMatrix GatherRows(const RealMatrix& x, std::span<const uint32_t> ids) {
  RealMatrix out(ids.size(), x.cols());
  for (size_t i = 0; i < ids.size(); ++i) out.row(i) = x.row(ids[i]);
  return out;
}

RealMatrix GatherCols(const RealMatrix& x, std::span<const size_t> cols) {
  RealMatrix out(x.rows(), cols.size());
  for (size_t j = 0; j < cols.size(); ++j) out.col(j) = x.col(cols[j]);
  return out;
}

Bytes EncodeF32(const RealMatrix& m) {
  ByteWriter w;
  WriteRealMatrixF32(w, m);
  return w.Take();
}

RealMatrix DecodeF32(std::span<const uint8_t> b) {
  ByteReader r(b);
  RealMatrix m = ReadRealMatrixF32(r);
  VFS_ENFORCE(r.done(), "trailing bytes after matrix");
  return m;
}

Bytes EncodeF64(const RealMatrix& m) {
  ByteWriter w;
  WriteRealMatrixF64(w, m);
  return w.Take();
}

RealMatrix DecodeF64(std::span<const uint8_t> b) {
  ByteReader r(b);
  RealMatrix m = ReadRealMatrixF64(r);
  VFS_ENFORCE(r.done(), "trailing bytes after matrix");
  return m;
}

double BatchMetric(const RealMatrix& logits, std::span<const int> labels,
                   Task task) {
  if (task == Task::kBinary) {
    const bool pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
    const bool neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
    if (!pos || !neg) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> s(logits.data(), logits.data() + logits.rows());
    return MetricAuc(s, labels);
  }
  std::vector<int> pred(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg;
    logits.row(i).maxCoeff(&arg);
    pred[i] = static_cast<int>(arg);
  }
  return MetricAccuracy(pred, labels);
}

}  // namespace

// Topology ---------------------------------------------------------------

size_t Topology::embedding_width() const {
  size_t h = 0;
  for (const auto& g : groups) h += g.width;
  return h;
}

std::vector<ParticipantId> Topology::PassiveClients() const {
  std::vector<ParticipantId> out;
  for (const auto& g : groups) out.insert(out.end(), g.clients.begin(), g.clients.end());
  std::sort(out.begin(), out.end());
  return out;
}

int Topology::GroupIndexOf(ParticipantId u) const {
  for (size_t g = 0; g < groups.size(); ++g)
    for (ParticipantId c : groups[g].clients)
      if (c == u) return static_cast<int>(g);
  return -1;
}

size_t Topology::ClientSlot(ParticipantId u) const {
  const int g = GroupIndexOf(u);
  VFS_ENFORCE(g >= 0, "participant ", u.value, " is not a passive client");
  const auto& cs = groups[g].clients;
  return static_cast<size_t>(std::find(cs.begin(), cs.end(), u) - cs.begin());
}

void Topology::Validate(size_t n_cols, size_t train_rows, size_t test_rows,
                        const QConfig& q) const {
  VFS_ENFORCE_T(ConfigError, !groups.empty(), "partition: no passive groups");
  std::vector<int> owner(n_cols, 0);
  auto claim = [&](size_t c, const std::string& who) {
    VFS_ENFORCE_T(ConfigError, c < n_cols, who, ": column ", c, " out of range");
    VFS_ENFORCE_T(ConfigError, owner[c]++ == 0, who, ": column ", c,
                  " held by two parties");
  };
  VFS_ENFORCE_T(ConfigError, !active_cols.empty(),
                "partition.active: active party holds no columns");
  for (size_t c : active_cols) claim(c, "partition.active");
  std::set<uint32_t> ids;
  size_t offset = 0;
  for (const auto& g : groups) {
    const std::string who = "partition.group." + std::to_string(g.group_id);
    VFS_ENFORCE_T(ConfigError, !g.clients.empty(), who, ".clients: empty group");
    VFS_ENFORCE_T(ConfigError, g.size() + 1 <= q.MaxSummands(), who,
                  ".clients: ", g.size(), " clients exceed the quantization "
                  "headroom of ", q.MaxSummands() - 1);
    VFS_ENFORCE_T(ConfigError, !g.cols.empty(), who, ".features: no columns");
    VFS_ENFORCE_T(ConfigError, g.width > 0, "model.group_widths: group ",
                  g.group_id, " has zero width");
    VFS_ENFORCE_T(ConfigError, g.offset == offset, who, ": segment offset ",
                  g.offset, " expected ", offset);
    offset += g.width;
    for (size_t c : g.cols) claim(c, who);
    for (ParticipantId u : g.clients)
      VFS_ENFORCE_T(ConfigError, u != kActiveParty && u != kServer &&
                    ids.insert(u.value).second,
                    who, ": invalid or repeated client id ", u.value);
    auto check_shards = [&](const std::vector<std::vector<uint32_t>>& shards,
                            size_t rows, const char* split) {
      VFS_ENFORCE_T(ConfigError, shards.size() == g.size(), who, ": ",
                    split, " shard count ", shards.size(), " != clients ",
                    g.size());
      std::vector<int> seen(rows, 0);
      for (const auto& s : shards)
        for (uint32_t id : s) {
          VFS_ENFORCE_T(ConfigError, id < rows && seen[id]++ == 0, who, ": ",
                        split, " sample ", id, " missing or held twice");
        }
      for (size_t i = 0; i < rows; ++i)
        VFS_ENFORCE_T(ConfigError, seen[i] == 1, who, ": ", split, " sample ",
                      i, " held by no client");
    };
    check_shards(g.train_shards, train_rows, "train");
    check_shards(g.test_shards, test_rows, "test");
  }
  for (size_t c = 0; c < n_cols; ++c)
    VFS_ENFORCE_T(ConfigError, owner[c] == 1, "partition: column ", c,
                  " held by no party");
}

Topology Topology::Build(const PartitionViews& train, const PartitionViews& test,
                         const std::vector<size_t>& widths) {
  VFS_ENFORCE_T(ConfigError, widths.size() == train.group_cols.size(),
                "model.group_widths: ", widths.size(), " widths for ",
                train.group_cols.size(), " groups");
  VFS_ENFORCE_T(ConfigError, test.shards.size() == train.shards.size(),
                "partition: train/test group count mismatch");
  Topology t;
  t.active_cols = train.active_cols;
  uint32_t next = 1;
  size_t offset = 0;
  for (size_t g = 0; g < widths.size(); ++g) {
    GroupTopology gt;
    gt.group_id = static_cast<int>(g + 1);
    gt.cols = train.group_cols[g];
    gt.width = widths[g];
    gt.offset = offset;
    offset += widths[g];
    auto to_ids = [](const std::vector<std::vector<size_t>>& shards) {
      std::vector<std::vector<uint32_t>> out;
      for (const auto& s : shards) out.emplace_back(s.begin(), s.end());
      return out;
    };
    gt.train_shards = to_ids(train.shards[g]);
    gt.test_shards = to_ids(test.shards[g]);
    for (size_t k = 0; k < gt.train_shards.size(); ++k) gt.clients.push_back({next++});
    t.groups.push_back(std::move(gt));
  }
  return t;
}

SplitModel InitSplitModel(const Topology& topo, const ModelLayout& layout,
                          uint64_t master_seed) {
  Rng rng = MakeRng(master_seed, Stream::kInit);
  auto dims = [](size_t in, const std::vector<size_t>& hidden, size_t out) {
    std::vector<size_t> d{in};
    d.insert(d.end(), hidden.begin(), hidden.end());
    d.push_back(out);
    return d;
  };
  const size_t h = topo.embedding_width();
  SplitModel m;
  m.active_bottom =
      DenseStack::Init(dims(topo.active_cols.size(), layout.active_hidden, h), true, rng);
  for (const auto& g : topo.groups)
    m.group_bottoms.push_back(
        DenseStack::Init(dims(g.cols.size(), layout.group_hidden, g.width), false, rng));
  m.top.bn = BatchNormLayer::Init(h);
  m.top.head = DenseStack::Init(dims(h, layout.head_hidden, layout.outputs), true, rng);
  return m;
}

// Local data -------------------------------------------------------------

long LocalData::Find(uint32_t id) const {
  auto it = std::lower_bound(ids.begin(), ids.end(), id);
  return (it != ids.end() && *it == id) ? static_cast<long>(it - ids.begin()) : -1;
}

LocalData LocalData::Gather(const Table& t, std::span<const uint32_t> ids,
                            std::span<const size_t> cols) {
  LocalData d;
  d.ids.assign(ids.begin(), ids.end());
  std::sort(d.ids.begin(), d.ids.end());
  d.x.resize(d.ids.size(), cols.size());
  for (size_t i = 0; i < d.ids.size(); ++i)
    for (size_t j = 0; j < cols.size(); ++j) d.x(i, j) = t.x(d.ids[i], cols[j]);
  return d;
}

// Batch selection --------------------------------------------------------

std::map<ParticipantId, std::vector<IdAssignment>> AssignRows(
    std::span<const uint32_t> sample_ids, const Topology& topo, bool test_split) {
  std::map<ParticipantId, std::vector<IdAssignment>> out;
  for (const auto& g : topo.groups) {
    const auto& shards = test_split ? g.test_shards : g.train_shards;
    for (size_t k = 0; k < g.size(); ++k) out[g.clients[k]];
    for (size_t row = 0; row < sample_ids.size(); ++row) {
      const uint32_t id = sample_ids[row];
      size_t owners = 0;
      for (size_t k = 0; k < g.size(); ++k) {
        if (std::binary_search(shards[k].begin(), shards[k].end(), id)) {
          out[g.clients[k]].push_back({id, static_cast<uint32_t>(row)});
          ++owners;
        }
      }
      VFS_ENFORCE_T(ProtocolError, owners == 1, "sample ", id, " has ", owners,
                    " owners in group ", g.group_id);
    }
  }
  return out;
}

Bytes EncodePlainIds(std::span<const IdAssignment> ids) {
  ByteWriter w;
  w.U32(static_cast<uint32_t>(ids.size()));
  for (const auto& a : ids) {
    w.U32(a.sample_id);
    w.U32(a.row);
  }
  return w.Take();
}

std::vector<IdAssignment> DecodePlainIds(std::span<const uint8_t> b) {
  ByteReader r(b);
  const uint32_t n = r.U32();
  VFS_ENFORCE(r.remaining() == uint64_t{n} * 8, "malformed id list");
  std::vector<IdAssignment> out(n);
  for (auto& a : out) {
    a.sample_id = r.U32();
    a.row = r.U32();
  }
  return out;
}

std::map<ParticipantId, Bytes> SealAssignments(
    const std::map<ParticipantId, std::vector<IdAssignment>>& owned,
    const ChannelSecrets* secrets, uint64_t nonce, size_t pad_to) {
  std::map<ParticipantId, Bytes> out;
  for (const auto& [u, ids] : owned) {
    if (secrets) {
      auto it = secrets->find(u);
      VFS_ENFORCE_T(ProtocolError, it != secrets->end(), "no channel secret for client ",
                    u.value);
      out[u] = SealIds(it->second, nonce, ids, pad_to);
    } else {
      out[u] = EncodePlainIds(ids);
    }
  }
  return out;
}

BatchPlan SelectBatch(uint32_t round, size_t n_samples, size_t batch,
                      const Topology& topo, const ChannelSecrets* secrets,
                      uint64_t nonce, Rng& rng) {
  VFS_ENFORCE_T(ConfigError, batch >= 1 && batch <= n_samples, "train.batch: ",
                batch, " exceeds dataset size ", n_samples);
  std::vector<uint32_t> idx(n_samples);
  std::iota(idx.begin(), idx.end(), 0u);
  for (size_t i = 0; i < batch; ++i)
    std::swap(idx[i], idx[i + rng() % (n_samples - i)]);
  BatchPlan plan;
  plan.round = round;
  plan.sample_ids.assign(idx.begin(), idx.begin() + batch);
  plan.assignments =
      SealAssignments(AssignRows(plan.sample_ids, topo, false), secrets, nonce, batch);
  return plan;
}

// Forward ----------------------------------------------------------------

RealMatrix ClientEmbedding(const DenseStack& f, const LocalData& data,
                           std::span<const IdAssignment> owned, size_t batch,
                           ClientCache* cache) {
  RealMatrix x(owned.size(), data.x.cols());
  for (size_t i = 0; i < owned.size(); ++i) {
    VFS_ENFORCE_T(ProtocolError, owned[i].row < batch, "batch row ", owned[i].row,
                  " out of range for batch size ", batch);
    const long at = data.Find(owned[i].sample_id);
    VFS_ENFORCE_T(ProtocolError, at >= 0, "sample ", owned[i].sample_id,
                  " not held by this client");
    x.row(i) = data.x.row(at);
  }
  RealMatrix full = RealMatrix::Zero(batch, f.out_dim());
  DenseStack::Cache local;
  if (!owned.empty()) {
    const RealMatrix y = f.Forward(x, &local);
    for (size_t i = 0; i < owned.size(); ++i) full.row(owned[i].row) = y.row(i);
  }
  if (cache) {
    cache->owned.assign(owned.begin(), owned.end());
    cache->bottom = std::move(local);
  }
  return full;
}

QMatrix ClientForward(ParticipantId u, const DenseStack& f, const LocalData& data,
                      std::span<const IdAssignment> owned, size_t batch,
                      const QConfig& q, const PairPool& pool,
                      const NoiseTag& tag, Rng& rounding, ClientCache* cache) {
  const RealMatrix h = ClientEmbedding(f, data, owned, batch, cache);
  return MaskTensor(QuantizeMatrix(h, q, rounding), SelfNoise(u, pool, tag));
}

QMatrix ActiveForward(const DenseStack& f0, const RealMatrix& x0,
                      const Topology& topo, const QConfig& q,
                      std::span<const PairPool> pools, const NoiseTag& tag,
                      Rng& rounding, DenseStack::Cache* cache) {
  VFS_ENFORCE_T(ProtocolError, static_cast<size_t>(x0.cols()) == f0.in_dim(),
                "active features: expected ", f0.in_dim(), " columns, got ",
                x0.cols());
  VFS_ENFORCE(pools.size() == topo.groups.size(), "one pool per group required");
  QMatrix out = QuantizeMatrix(f0.Forward(x0, cache), q, rounding);
  for (size_t g = 0; g < topo.groups.size(); ++g) {
    const auto& gt = topo.groups[g];
    NoiseTag t = tag;
    t.rows = out.rows();
    t.cols = gt.width;
    const QMatrix noise = SelfNoise(kActiveParty, pools[g], t);
    for (size_t r = 0; r < out.rows(); ++r)
      for (size_t c = 0; c < gt.width; ++c) out(r, gt.offset + c) += noise(r, c);
  }
  return out;
}

std::vector<bool> DetectDroppedGroups(
    const std::vector<std::vector<bool>>& received) {
  std::vector<bool> dropped;
  for (const auto& g : received)
    dropped.push_back(std::find(g.begin(), g.end(), false) != g.end());
  return dropped;
}

namespace {

AggregatedEmbedding EmptyAggregate(size_t batch, const Topology& topo,
                                   const std::vector<bool>& dropped) {
  VFS_ENFORCE(dropped.size() == topo.groups.size(), "dropped flags: expected ",
              topo.groups.size(), ", got ", dropped.size());
  VFS_ENFORCE_T(ProtocolError,
                std::find(dropped.begin(), dropped.end(), false) != dropped.end(),
                "no surviving segments");
  AggregatedEmbedding e;
  e.h = RealMatrix::Zero(batch, topo.embedding_width());
  e.present_cols.assign(topo.embedding_width(), false);
  e.group_present.assign(topo.groups.size(), false);
  return e;
}

void MarkPresent(AggregatedEmbedding& e, const GroupTopology& g, size_t gi) {
  e.group_present[gi] = true;
  for (size_t c = 0; c < g.width; ++c) e.present_cols[g.offset + c] = true;
}

}  // namespace

AggregatedEmbedding ServerAggregateForward(
    const QMatrix& active_msg,
    const std::vector<std::vector<const QMatrix*>>& client_msgs,
    const Topology& topo, const std::vector<bool>& dropped, const QConfig& q) {
  VFS_ENFORCE_T(ProtocolError, active_msg.cols() == topo.embedding_width(),
                "active embedding width ", active_msg.cols(), " != ",
                topo.embedding_width());
  VFS_ENFORCE(client_msgs.size() == topo.groups.size(), "message sets: expected ",
              topo.groups.size(), " groups");
  AggregatedEmbedding e = EmptyAggregate(active_msg.rows(), topo, dropped);
  for (size_t gi = 0; gi < topo.groups.size(); ++gi) {
    if (dropped[gi]) continue;
    const auto& g = topo.groups[gi];
    VFS_ENFORCE_T(ProtocolError, client_msgs[gi].size() == g.size(),
                  "group ", g.group_id, ": partial message set");
    std::vector<QMatrix> parts{QSegment(active_msg, g.offset, g.width)};
    for (const QMatrix* m : client_msgs[gi]) {
      VFS_ENFORCE_T(ProtocolError, m != nullptr, "group ", g.group_id,
                    ": partial message set");
      VFS_ENFORCE_T(ProtocolError, m->SameShape(parts[0]), "group ", g.group_id,
                    ": message shape mismatch");
      parts.push_back(*m);
    }
    const QMatrix sum = UnmaskAggregate(parts, true);
    e.h.middleCols(g.offset, g.width) = DequantizeSum(sum, g.size() + 1, q);
    MarkPresent(e, g, gi);
  }
  return e;
}

AggregatedEmbedding ServerAggregatePlain(
    const RealMatrix& active_msg,
    const std::vector<std::vector<const RealMatrix*>>& client_msgs,
    const Topology& topo, const std::vector<bool>& dropped) {
  VFS_ENFORCE_T(ProtocolError,
                static_cast<size_t>(active_msg.cols()) == topo.embedding_width(),
                "active embedding width ", active_msg.cols(), " != ",
                topo.embedding_width());
  VFS_ENFORCE(client_msgs.size() == topo.groups.size(), "message sets: expected ",
              topo.groups.size(), " groups");
  AggregatedEmbedding e = EmptyAggregate(active_msg.rows(), topo, dropped);
  for (size_t gi = 0; gi < topo.groups.size(); ++gi) {
    if (dropped[gi]) continue;
    const auto& g = topo.groups[gi];
    VFS_ENFORCE_T(ProtocolError, client_msgs[gi].size() == g.size(),
                  "group ", g.group_id, ": partial message set");
    RealMatrix seg = active_msg.middleCols(g.offset, g.width);
    for (const RealMatrix* m : client_msgs[gi]) {
      VFS_ENFORCE_T(ProtocolError, m != nullptr, "group ", g.group_id,
                    ": partial message set");
      VFS_ENFORCE_T(ProtocolError,
                    m->rows() == seg.rows() && m->cols() == seg.cols(),
                    "group ", g.group_id, ": message shape mismatch");
      seg += *m;
    }
    e.h.middleCols(g.offset, g.width) = seg;
    MarkPresent(e, g, gi);
  }
  return e;
}

RealMatrix PadAndPredict(TopModel& top, const AggregatedEmbedding& emb,
                         bool training, TopModel::Cache* cache) {
  VFS_ENFORCE_T(ProtocolError,
                std::find(emb.present_cols.begin(), emb.present_cols.end(), true) !=
                    emb.present_cols.end(),
                "no surviving segments");
  return top.Forward(emb.h, emb.present_cols, training, cache);
}

ServerBackwardResult ServerBackward(TopModel& top, const TopModel::Cache& cache,
                                    const RealMatrix& logits,
                                    std::span<const int> labels, Task task,
                                    double lr) {
  ServerBackwardResult r;
  LossResult lr_ = LossAndGrad(logits, labels, task);
  r.loss = lr_.loss;
  r.logits = logits;
  TopModel::Grads g = top.Backward(cache, lr_.d_logits);
  top.SgdApply(g, lr);
  r.d_embedding = std::move(g.bn.dx);
  return r;
}

RealMatrix SegmentOf(const RealMatrix& m, const Topology& topo, size_t g) {
  const auto& gt = topo.groups.at(g);
  return m.middleCols(gt.offset, gt.width);
}

// Backward ---------------------------------------------------------------

RealMatrix ClientLocalUpdate(const DenseStack& f, const ClientCache& cache,
                             const RealMatrix& d_segment, double lr) {
  VFS_ENFORCE_T(ProtocolError, static_cast<size_t>(d_segment.cols()) == f.out_dim(),
                "gradient segment width ", d_segment.cols(), " != ", f.out_dim());
  if (cache.owned.empty()) return RealMatrix::Zero(1, f.ParamCount());
  VFS_ENFORCE_T(ProtocolError, !cache.bottom.inputs.empty(),
                "missing forward cache");
  RealMatrix dy(cache.owned.size(), d_segment.cols());
  for (size_t i = 0; i < cache.owned.size(); ++i) {
    VFS_ENFORCE_T(ProtocolError, cache.owned[i].row < d_segment.rows(),
                  "gradient segment has too few rows");
    dy.row(i) = d_segment.row(cache.owned[i].row);
  }
  return -lr * f.FlatGrads(f.Backward(cache.bottom, dy));
}

QMatrix MaskUpdate(ParticipantId u, const RealMatrix& delta, const QConfig& q,
                   const PairPool& backward_pool, const NoiseTag& tag,
                   Rng& rounding) {
  NoiseTag t = tag;
  t.rows = delta.rows();
  t.cols = delta.cols();
  return MaskTensor(QuantizeMatrix(delta, q.ForUpdates(), rounding),
                    SelfNoise(u, backward_pool, t));
}

bool ServerApplyGroupUpdate(DenseStack& bottom,
                            const std::vector<const QMatrix*>& msgs,
                            const QConfig& q) {
  if (msgs.empty()) return false;
  std::vector<QMatrix> parts;
  for (const QMatrix* m : msgs) {
    if (!m) return false;
    VFS_ENFORCE_T(ProtocolError, m->rows() == 1 && m->cols() == bottom.ParamCount(),
                  "update shape mismatch");
    parts.push_back(*m);
  }
  bottom.AddFlat(DequantizeSum(UnmaskAggregate(parts, true), parts.size(),
                               q.ForUpdates()));
  return true;
}

bool ServerApplyGroupUpdatePlain(DenseStack& bottom,
                                 const std::vector<const RealMatrix*>& msgs) {
  if (msgs.empty()) return false;
  RealMatrix sum = RealMatrix::Zero(1, bottom.ParamCount());
  for (const RealMatrix* m : msgs) {
    if (!m) return false;
    VFS_ENFORCE_T(ProtocolError,
                  m->rows() == 1 && static_cast<size_t>(m->cols()) == bottom.ParamCount(),
                  "update shape mismatch");
    sum += *m;
  }
  bottom.AddFlat(sum);
  return true;
}

// Transport --------------------------------------------------------------

std::string_view RoundModeName(RoundMode m) {
  switch (m) {
    case RoundMode::kClean: return "clean";
    case RoundMode::kPad: return "pad";
    case RoundMode::kDiscard: return "discard";
  }
  return "unknown";
}

Envelope Transport::Send(Envelope e, CostTag tag, size_t overhead,
                         CostTag overhead_tag) {
  const Bytes wire = EncodeEnvelope(e);
  VFS_ENFORCE(overhead <= wire.size(), "overhead exceeds message size");
  if (ledger_) {
    ledger_->AddBytes(e.from, e.to, tag, wire.size() - overhead);
    if (overhead) ledger_->AddBytes(e.from, e.to, overhead_tag, overhead);
  }
  Envelope out = DecodeEnvelope(wire);
  if (capture_) captured_.push_back(out);
  return out;
}

// Session ----------------------------------------------------------------

Session::Session(Topology topo, const Table& train, const Table& test,
                 SplitModel init, ProtocolConfig cfg, OverheadLedger* ledger)
    : topo_(std::move(topo)), cfg_(cfg), ledger_(ledger), transport_(ledger) {
  topo_.Validate(static_cast<size_t>(train.x.cols()), train.rows(), test.rows(),
                 cfg_.q);
  size_t widest = 0;
  for (const auto& g : topo_.groups) widest = std::max(widest, g.size());
  cfg_.q.Validate(widest + 1);
  VFS_ENFORCE_T(ConfigError, cfg_.batch >= 2 && cfg_.batch <= train.rows(),
                "train.batch: ", cfg_.batch, " must be in [2, ", train.rows(), "]");
  VFS_ENFORCE_T(ConfigError, cfg_.lr > 0 && std::isfinite(cfg_.lr),
                "train.lr: must be positive");
  VFS_ENFORCE_T(ConfigError, cfg_.rotation_interval >= 1,
                "train.rotation_interval: must be at least 1");
  VFS_ENFORCE_T(ConfigError, test.rows() >= 1, "data.test_fraction: empty test split");

  const size_t h = topo_.embedding_width();
  VFS_ENFORCE_T(ConfigError,
                init.active_bottom.in_dim() == topo_.active_cols.size() &&
                    init.active_bottom.out_dim() == h,
                "model: active bottom is ", init.active_bottom.in_dim(), "->",
                init.active_bottom.out_dim(), ", topology needs ",
                topo_.active_cols.size(), "->", h);
  VFS_ENFORCE_T(ConfigError, init.group_bottoms.size() == topo_.groups.size(),
                "model: ", init.group_bottoms.size(), " group bottoms for ",
                topo_.groups.size(), " groups");
  for (size_t g = 0; g < topo_.groups.size(); ++g) {
    const auto& b = init.group_bottoms[g];
    VFS_ENFORCE_T(ConfigError,
                  b.in_dim() == topo_.groups[g].cols.size() &&
                      b.out_dim() == topo_.groups[g].width,
                  "model: group ", g + 1, " bottom is ", b.in_dim(), "->",
                  b.out_dim(), ", topology needs ", topo_.groups[g].cols.size(),
                  "->", topo_.groups[g].width);
  }
  VFS_ENFORCE_T(ConfigError, init.top.bn.width() == h && init.top.head.in_dim() == h,
                "model: top input width ", init.top.head.in_dim(), " != ", h);
  const size_t outputs = cfg_.task == Task::kBinary ? 1 : static_cast<size_t>(train.n_classes);
  VFS_ENFORCE_T(ConfigError, init.top.head.out_dim() == outputs, "model: head emits ",
                init.top.head.out_dim(), " outputs, task needs ", outputs);

  active_bottom_ = init.active_bottom;
  active_train_x_ = GatherCols(train.x, topo_.active_cols);
  active_test_x_ = GatherCols(test.x, topo_.active_cols);
  train_labels_ = train.labels;
  test_labels_ = test.labels;
  for (size_t g = 0; g < topo_.groups.size(); ++g) {
    const auto& gt = topo_.groups[g];
    for (size_t k = 0; k < gt.size(); ++k) {
      Client c;
      c.id = gt.clients[k];
      c.group = g;
      c.bottom = init.group_bottoms[g];
      c.train = LocalData::Gather(train, gt.train_shards[k], gt.cols);
      c.test = LocalData::Gather(test, gt.test_shards[k], gt.cols);
      clients_.push_back(std::move(c));
    }
    if (gt.size() >= 2) server_bottoms_[g] = init.group_bottoms[g];
  }
  std::sort(clients_.begin(), clients_.end(),
            [](const Client& a, const Client& b) { return a.id < b.id; });
  top_ = init.top;
}

Rng Session::RoundingRng(uint32_t round, ParticipantId u, Phase phase,
                         uint16_t slot) const {
  return MakeRng(cfg_.master_seed, Stream::kRounding,
                 {round, u.value, static_cast<uint64_t>(phase), slot});
}

void Session::EnsureKeys(uint32_t round) {
  const uint32_t e = round / cfg_.rotation_interval;
  if (!cfg_.secure) {
    epoch_ = e;
    return;
  }
  if (keys_ready_ && e == epoch_) return;
  VFS_ENFORCE_T(ProtocolError, !keys_ready_ || e > epoch_, "key epoch ", e,
                " does not advance past ", epoch_);
  epoch_ = e;

  std::map<ParticipantId, KeyPair> keys;
  auto gen = [&](ParticipantId u) {
    ScopedCost cost(ledger_, Uid(u), CostTag::kKeygen);
    keys[u] = EpochKeypair(cfg_.master_seed, e, u);
  };
  gen(kActiveParty);
  for (const auto& c : clients_) gen(c.id);
  {
    ScopedCost cost(ledger_, Uid(kServer), CostTag::kKeygen);
    server_keys_ = EpochKeypair(cfg_.master_seed, e, kServer);
  }

  auto announce = [&](ParticipantId from, ParticipantId to, const PublicKey& pk) {
    ByteWriter w;
    w.U32(e);
    w.Raw(pk);
    Envelope env = transport_.Send(
        {MsgKind::kPublicKeyAnnouncement, from.value, to.value, w.Take()},
        CostTag::kPubkeyExchange);
    VFS_ENFORCE_T(ProtocolError, env.payload.size() == 4 + pk.size(),
                  "malformed key announcement");
  };
  announce(kActiveParty, kServer, keys[kActiveParty].public_value);
  for (const auto& c : clients_) announce(kActiveParty, c.id, keys[kActiveParty].public_value);
  for (const auto& c : clients_) {
    const auto& gt = topo_.groups[c.group];
    announce(c.id, kActiveParty, keys[c.id].public_value);
    for (ParticipantId peer : gt.clients)
      if (peer != c.id) announce(c.id, peer, keys[c.id].public_value);
    announce(c.id, kServer, keys[c.id].public_value);
  }
  announce(kServer, kActiveParty, server_keys_.public_value);
  for (const auto& c : clients_) announce(kServer, c.id, server_keys_.public_value);

  pools_.clear();
  backward_pools_.clear();
  for (const auto& gt : topo_.groups) {
    std::vector<ParticipantId> members{kActiveParty};
    members.insert(members.end(), gt.clients.begin(), gt.clients.end());
    const double t0 = CpuSeconds();
    pools_.push_back(PairPool::Build(gt.group_id, members, e, keys));
    // Every member derives one secret per peer; charge the shared cost evenly.
    const double share = (CpuSeconds() - t0) / static_cast<double>(members.size());
    if (ledger_)
      for (ParticipantId m : members) ledger_->AddSeconds(Uid(m), CostTag::kKeygen, share);
    backward_pools_.push_back(gt.size() >= 2 ? pools_.back().Restrict(gt.clients)
                                             : PairPool{});
  }

  auto server_channel = [&](ParticipantId u) {
    SharedSecret a, b;
    {
      ScopedCost cost(ledger_, Uid(kServer), CostTag::kKeygen);
      a = DeriveSharedSecret(server_keys_, keys[u].public_value);
    }
    {
      ScopedCost cost(ledger_, Uid(u), CostTag::kKeygen);
      b = DeriveSharedSecret(keys[u], server_keys_.public_value);
    }
    VFS_ENFORCE_T(ProtocolError, a == b, "server channel secrets disagree for ",
                  u.value);
    return a;
  };
  c0_server_secret_ = server_channel(kActiveParty);
  c0_secrets_.clear();
  for (auto& c : clients_) {
    c.c0_secret = pools_[c.group].Secret(kActiveParty, c.id);
    c0_secrets_[c.id] = c.c0_secret;
    c.server_secret = server_channel(c.id);
  }
  keys_ready_ = true;
}

AggregatedEmbedding Session::ForwardPass(
    Phase phase, uint16_t slot, const BatchPlan& plan,
    const std::set<ParticipantId>& absent, bool test_split,
    DenseStack::Cache* active_cache, std::vector<int>* labels_at_server) {
  const bool secure = cfg_.secure;
  const uint32_t round = plan.round;
  const std::span<const uint32_t> ids = plan.sample_ids;
  const size_t batch = ids.size();
  const CostTag id_tag = secure ? CostTag::kSealIds : CostTag::kBaselinePayload;

  // C0 relays each sealed list through the server.
  std::map<ParticipantId, Bytes> at_server;
  for (const auto& [u, bytes] : plan.assignments) {
    ByteWriter w;
    w.U32(u.value);
    w.Blob(bytes);
    Envelope env = transport_.Send(
        {MsgKind::kBatchAssignment, Uid(kActiveParty), Uid(kServer), w.Take()}, id_tag);
    ByteReader r(env.payload);
    const ParticipantId to{r.U32()};
    at_server[to] = r.Blob();
  }

  const NoiseTag base_tag{epoch_, round, phase, slot, batch, 0};
  std::vector<std::vector<const QMatrix*>> qmsgs(topo_.groups.size());
  std::vector<std::vector<const RealMatrix*>> rmsgs(topo_.groups.size());
  std::vector<std::vector<bool>> received(topo_.groups.size());
  std::vector<QMatrix> qstore;
  std::vector<RealMatrix> rstore;
  qstore.reserve(clients_.size());
  rstore.reserve(clients_.size());
  for (size_t g = 0; g < topo_.groups.size(); ++g) {
    qmsgs[g].assign(topo_.groups[g].size(), nullptr);
    rmsgs[g].assign(topo_.groups[g].size(), nullptr);
    received[g].assign(topo_.groups[g].size(), false);
  }

  for (auto& c : clients_) {
    if (absent.count(c.id)) continue;
    const uint32_t uid = Uid(c.id);
    Envelope env = transport_.Send(
        {MsgKind::kBatchAssignment, Uid(kServer), uid, at_server.at(c.id)}, id_tag);
    std::vector<IdAssignment> owned;
    {
      ScopedCost cost(ledger_, uid, id_tag);
      owned = secure ? OpenIds(c.c0_secret, env.payload) : DecodePlainIds(env.payload);
    }
    RealMatrix h;
    {
      ScopedCost cost(ledger_, uid, CostTag::kBaselinePayload);
      h = ClientEmbedding(c.bottom, test_split ? c.test : c.train, owned, batch,
                          test_split ? nullptr : &c.cache);
    }
    Bytes payload;
    if (secure) {
      Rng rng = RoundingRng(round, c.id, phase, slot);
      QMatrix q;
      {
        ScopedCost cost(ledger_, uid, CostTag::kQuantize);
        q = QuantizeMatrix(h, cfg_.q, rng);
      }
      {
        ScopedCost cost(ledger_, uid, CostTag::kMaskCompute);
        NoiseTag t = base_tag;
        t.cols = h.cols();
        q = MaskTensor(q, SelfNoise(c.id, pools_[c.group], t));
      }
      payload = EncodeQMatrix(q);
    } else {
      payload = EncodeF32(h);
    }
    Envelope msg = transport_.Send(
        {MsgKind::kMaskedEmbedding, uid, Uid(kServer), std::move(payload)},
        CostTag::kBaselinePayload);
    const size_t slot_in_group = topo_.ClientSlot(ParticipantId{msg.from});
    received[c.group][slot_in_group] = true;
    if (secure) {
      qstore.push_back(DecodeQMatrix(msg.payload));
      qmsgs[c.group][slot_in_group] = &qstore.back();
    } else {
      rstore.push_back(DecodeF32(msg.payload));
      rmsgs[c.group][slot_in_group] = &rstore.back();
    }
  }

  // C0 forward.
  const RealMatrix x0 = GatherRows(test_split ? active_test_x_ : active_train_x_, ids);
  Bytes active_payload;
  {
    RealMatrix h0;
    {
      ScopedCost cost(ledger_, Uid(kActiveParty), CostTag::kBaselinePayload);
      h0 = active_bottom_.Forward(x0, active_cache);
    }
    if (secure) {
      Rng rng = RoundingRng(round, kActiveParty, phase, slot);
      QMatrix q;
      {
        ScopedCost cost(ledger_, Uid(kActiveParty), CostTag::kQuantize);
        q = QuantizeMatrix(h0, cfg_.q, rng);
      }
      {
        ScopedCost cost(ledger_, Uid(kActiveParty), CostTag::kMaskCompute);
        for (size_t g = 0; g < topo_.groups.size(); ++g) {
          const auto& gt = topo_.groups[g];
          NoiseTag t = base_tag;
          t.cols = gt.width;
          const QMatrix noise = SelfNoise(kActiveParty, pools_[g], t);
          for (size_t r = 0; r < batch; ++r)
            for (size_t k = 0; k < gt.width; ++k) q(r, gt.offset + k) += noise(r, k);
        }
      }
      active_payload = EncodeQMatrix(q);
    } else {
      active_payload = EncodeF32(h0);
    }
  }
  Envelope active_msg = transport_.Send(
      {MsgKind::kMaskedEmbedding, Uid(kActiveParty), Uid(kServer),
       std::move(active_payload)},
      CostTag::kBaselinePayload);

  if (labels_at_server) {
    ByteWriter w;
    for (uint32_t id : ids) w.U32(static_cast<uint32_t>(train_labels_.at(id)));
    Envelope env = transport_.Send(
        {MsgKind::kLabelVector, Uid(kActiveParty), Uid(kServer), w.Take()},
        CostTag::kBaselinePayload);
    ByteReader r(env.payload);
    labels_at_server->clear();
    for (size_t i = 0; i < batch; ++i)
      labels_at_server->push_back(static_cast<int>(r.U32()));
  }

  // Server aggregation.
  const std::vector<bool> dropped = DetectDroppedGroups(received);
  if (secure) {
    const QMatrix a = DecodeQMatrix(active_msg.payload);
    ScopedCost cost(ledger_, Uid(kServer), CostTag::kUnmask);
    return ServerAggregateForward(a, qmsgs, topo_, dropped, cfg_.q);
  }
  return ServerAggregatePlain(DecodeF32(active_msg.payload), rmsgs, topo_, dropped);
}

RoundOutcome Session::TrainRound(uint32_t round,
                                 const std::set<ParticipantId>& absent) {
  for (ParticipantId u : absent)
    VFS_ENFORCE_T(ProtocolError, topo_.GroupIndexOf(u) >= 0, "participant ",
                  u.value, " cannot drop out");
  EnsureKeys(round);
  const bool secure = cfg_.secure;

  BatchPlan plan;
  {
    ScopedCost cost(ledger_, Uid(kActiveParty), CostTag::kBaselinePayload);
    Rng rng = MakeRng(cfg_.master_seed, Stream::kBatch, {round});
    plan = SelectBatch(round, train_labels_.size(), cfg_.batch, topo_, nullptr, 0, rng);
  }
  if (secure) {
    ScopedCost cost(ledger_, Uid(kActiveParty), CostTag::kSealIds);
    plan.assignments = SealAssignments(AssignRows(plan.sample_ids, topo_, false), &c0_secrets_,
                                       SealNonce(round, kTrainIds, 0), cfg_.batch);
  }

  DenseStack::Cache active_cache;
  std::vector<int> labels;
  AggregatedEmbedding emb = ForwardPass(Phase::kForwardEmbedding, 0, plan, absent,
                                        false, &active_cache, &labels);

  RoundOutcome out;
  out.round = round;
  out.dropped_clients.assign(absent.begin(), absent.end());
  for (size_t g = 0; g < topo_.groups.size(); ++g)
    if (!emb.group_present[g]) out.dropped_groups.push_back(topo_.groups[g].group_id);
  out.mode = out.dropped_groups.empty() ? RoundMode::kClean : RoundMode::kPad;

  ServerBackwardResult sb;
  {
    ScopedCost cost(ledger_, Uid(kServer), CostTag::kBaselinePayload);
    TopModel::Cache tc;
    const RealMatrix logits = PadAndPredict(top_, emb, true, &tc);
    sb = ServerBackward(top_, tc, logits, labels, cfg_.task, cfg_.lr);
  }
  out.loss = sb.loss;
  out.batch_metric = BatchMetric(sb.logits, labels, cfg_.task);

  // Gradient fan-out, sealed per server channel in secure mode.
  auto send_gradient = [&](ParticipantId to, const SharedSecret& secret,
                           const RealMatrix& grad) {
    Bytes body = EncodeF32(grad);
    size_t overhead = 0;
    if (secure) {
      ScopedCost cost(ledger_, Uid(kServer), CostTag::kSealIds);
      body = SealBytes(secret, SealNonce(round, kGradient, 0), body);
      overhead = kSealOverheadBytes;
    }
    Envelope env = transport_.Send(
        {MsgKind::kGradientSegment, Uid(kServer), Uid(to), std::move(body)},
        CostTag::kBaselinePayload, overhead, CostTag::kSealIds);
    if (secure) {
      ScopedCost cost(ledger_, Uid(to), CostTag::kSealIds);
      return DecodeF32(OpenBytes(secret, env.payload));
    }
    return DecodeF32(env.payload);
  };

  {
    const RealMatrix d = send_gradient(kActiveParty, c0_server_secret_, sb.d_embedding);
    ScopedCost cost(ledger_, Uid(kActiveParty), CostTag::kBaselinePayload);
    active_bottom_.SgdApply(active_bottom_.Backward(active_cache, d), cfg_.lr);
  }

  std::map<size_t, std::vector<QMatrix>> qupdates;
  std::map<size_t, std::vector<RealMatrix>> rupdates;
  for (auto& c : clients_) {
    if (!emb.group_present[c.group]) continue;
    const uint32_t uid = Uid(c.id);
    const RealMatrix d =
        send_gradient(c.id, c.server_secret, SegmentOf(sb.d_embedding, topo_, c.group));
    RealMatrix delta;
    {
      ScopedCost cost(ledger_, uid, CostTag::kBaselinePayload);
      delta = ClientLocalUpdate(c.bottom, c.cache, d, cfg_.lr);
    }
    const auto& gt = topo_.groups[c.group];
    if (gt.size() == 1) {
      c.bottom.AddFlat(delta);
      continue;
    }
    Bytes payload;
    if (secure) {
      Rng rng = RoundingRng(round, c.id, Phase::kBackwardUpdate, 0);
      QMatrix q;
      {
        ScopedCost cost(ledger_, uid, CostTag::kQuantize);
        q = QuantizeMatrix(delta, cfg_.q.ForUpdates(), rng);
      }
      {
        ScopedCost cost(ledger_, uid, CostTag::kMaskCompute);
        const NoiseTag t{epoch_, round, Phase::kBackwardUpdate, 0, 1,
                         static_cast<size_t>(delta.cols())};
        q = MaskTensor(q, SelfNoise(c.id, backward_pools_[c.group], t));
      }
      payload = EncodeQMatrix(q);
    } else {
      payload = EncodeF32(delta);
    }
    Envelope env = transport_.Send(
        {MsgKind::kMaskedUpdate, uid, Uid(kServer), std::move(payload)},
        CostTag::kBaselinePayload);
    if (secure) qupdates[c.group].push_back(DecodeQMatrix(env.payload));
    else rupdates[c.group].push_back(DecodeF32(env.payload));
  }

  for (auto& [g, bottom] : server_bottoms_) {
    if (!emb.group_present[g]) continue;
    bool applied;
    {
      ScopedCost cost(ledger_, Uid(kServer),
                      secure ? CostTag::kUnmask : CostTag::kBaselinePayload);
      if (secure) {
        std::vector<const QMatrix*> ptrs;
        for (const auto& m : qupdates[g]) ptrs.push_back(&m);
        ptrs.resize(topo_.groups[g].size(), nullptr);
        applied = ServerApplyGroupUpdate(bottom, ptrs, cfg_.q);
      } else {
        std::vector<const RealMatrix*> ptrs;
        for (const auto& m : rupdates[g]) ptrs.push_back(&m);
        ptrs.resize(topo_.groups[g].size(), nullptr);
        applied = ServerApplyGroupUpdatePlain(bottom, ptrs);
      }
    }
    if (!applied) continue;
    const Bytes params = EncodeF64(bottom.FlatParams());
    for (auto& c : clients_) {
      if (c.group != g) continue;
      Envelope env = transport_.Send(
          {MsgKind::kBottomParams, Uid(kServer), Uid(c.id), params},
          CostTag::kBaselinePayload);
      c.bottom.SetFlatParams(DecodeF64(env.payload));
    }
  }
  for (auto& c : clients_) c.cache = ClientCache{};
  return out;
}

EvalResult Session::Evaluate() {
  if (cfg_.secure && !keys_ready_) EnsureKeys(0);
  const uint32_t counter = eval_counter_++;
  const size_t n = test_labels_.size();
  VFS_ENFORCE_T(ProtocolError, n > 0, "empty test set");
  const size_t chunk = cfg_.batch;
  VFS_ENFORCE_T(ProtocolError, (n + chunk - 1) / chunk <= 0xFFFF,
                "test split too large for the eval slot counter");
  RealMatrix logits(n, top_.head.out_dim());
  for (size_t begin = 0, slot = 0; begin < n; begin += chunk, ++slot) {
    const size_t len = std::min(chunk, n - begin);
    BatchPlan plan;
    plan.round = counter;
    plan.sample_ids.resize(len);
    std::iota(plan.sample_ids.begin(), plan.sample_ids.end(),
              static_cast<uint32_t>(begin));
    std::map<ParticipantId, std::vector<IdAssignment>> owned;
    {
      ScopedCost cost(ledger_, Uid(kActiveParty), CostTag::kBaselinePayload);
      owned = AssignRows(plan.sample_ids, topo_, true);
    }
    {
      ScopedCost cost(ledger_, Uid(kActiveParty),
                      cfg_.secure ? CostTag::kSealIds : CostTag::kBaselinePayload);
      plan.assignments = SealAssignments(
          owned, cfg_.secure ? &c0_secrets_ : nullptr,
          SealNonce(counter, kEvalIds, static_cast<uint16_t>(slot)), len);
    }
    const AggregatedEmbedding emb =
        ForwardPass(Phase::kEvalForward, static_cast<uint16_t>(slot), plan, {},
                    true, nullptr, nullptr);
    ScopedCost cost(ledger_, Uid(kServer), CostTag::kBaselinePayload);
    logits.middleRows(begin, len) = PadAndPredict(top_, emb, false, nullptr);
  }
  // Scores return to C0, which alone holds the labels.
  EvalResult r;
  r.rows = n;
  r.loss = LossAndGrad(logits, test_labels_, cfg_.task).loss;
  r.metric = BatchMetric(logits, test_labels_, cfg_.task);
  return r;
}

SplitModel Session::Model() const {
  SplitModel m;
  m.active_bottom = active_bottom_;
  m.group_bottoms.resize(topo_.groups.size());
  std::vector<bool> seen(topo_.groups.size(), false);
  for (const auto& c : clients_) {
    if (seen[c.group]) continue;
    seen[c.group] = true;
    m.group_bottoms[c.group] = c.bottom;
  }
  m.top = top_;
  return m;
}

Bytes Session::StateBytes() const {
  ByteWriter w;
  w.Blob(SaveCheckpoint(Model()));
  for (const auto& c : clients_) {
    w.U32(c.id.value);
    WriteRealMatrixF64(w, c.bottom.FlatParams());
  }
  for (const auto& [g, b] : server_bottoms_) {
    w.U32(static_cast<uint32_t>(g));
    WriteRealMatrixF64(w, b.FlatParams());
  }
  return w.Take();
}

}  // namespace vfedsec
