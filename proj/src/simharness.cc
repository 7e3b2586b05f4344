#include "vfedsec/simharness.h"

#include <sodium.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace vfedsec {

void DropoutModel::Validate() const {
  VFS_ENFORCE_T(ConfigError, p_round >= 0 && p_round <= 1,
                "dropout.p_round: must be in [0, 1], got ", p_round);
  VFS_ENFORCE_T(ConfigError, f_clients > 0 && f_clients <= 1,
                "dropout.f_clients: must be in (0, 1], got ", f_clients);
}

size_t DropoutCount(double f_clients, size_t pool) {
  const auto n = static_cast<size_t>(std::floor(f_clients * pool + 0.5));
  return std::min(pool, std::max<size_t>(1, n));
}

std::set<ParticipantId> DropoutDraw(const DropoutModel& m, uint32_t round,
                                    std::span<const ParticipantId> pool) {
  VFS_ENFORCE(!pool.empty(), "dropout pool is empty");
  Rng rng = MakeRng(m.seed, Stream::kDropout, {round});
  if (!(Uniform01(rng) < m.p_round)) return {};
  std::vector<ParticipantId> v(pool.begin(), pool.end());
  const size_t k = DropoutCount(m.f_clients, v.size());
  for (size_t i = 0; i < k; ++i) std::swap(v[i], v[i + rng() % (v.size() - i)]);
  return {v.begin(), v.begin() + k};
}

std::string_view DropModeName(DropMode m) {
  return m == DropMode::kPad ? "pad" : "discard";
}

RoundOutcome RunRound(Session& session, DropMode mode, uint32_t round,
                      const std::set<ParticipantId>& dropped) {
  const Topology& topo = session.topology();
  bool all_groups_hit = !dropped.empty();
  for (const auto& g : topo.groups) {
    bool hit = false;
    for (ParticipantId u : g.clients) hit = hit || dropped.count(u) > 0;
    all_groups_hit = all_groups_hit && hit;
  }
  if (!dropped.empty() && (mode == DropMode::kDiscard || all_groups_hit)) {
    RoundOutcome out;
    out.round = round;
    out.mode = RoundMode::kDiscard;
    out.served = false;
    out.loss = std::numeric_limits<double>::quiet_NaN();
    out.batch_metric = std::numeric_limits<double>::quiet_NaN();
    out.dropped_clients.assign(dropped.begin(), dropped.end());
    for (const auto& g : topo.groups)
      for (ParticipantId u : g.clients)
        if (dropped.count(u)) {
          out.dropped_groups.push_back(g.group_id);
          break;
        }
    return out;
  }
  return session.TrainRound(round, dropped);
}

std::optional<double> TrainReport::MetricAfter(uint32_t round) const {
  if (round == 0) return initial.metric;
  if (round > rounds.size()) return std::nullopt;
  const auto& e = rounds[round - 1].eval;
  if (!e) return std::nullopt;
  return e->metric;
}

TrainReport RunTraining(const ExperimentSpec& spec, const SplitTable& data,
                        const std::string& fingerprint) {
  spec.training.dropout.Validate();
  TrainReport report;
  report.mode = std::string(DropModeName(spec.training.mode));
  report.fingerprint = fingerprint;
  report.input_widths.push_back(spec.topo.active_cols.size());
  for (const auto& g : spec.topo.groups) report.input_widths.push_back(g.cols.size());
  Session session(spec.topo, data.train, data.test,
                  InitSplitModel(spec.topo, spec.layout, spec.protocol.master_seed),
                  spec.protocol, &report.ledger);
  report.initial = session.Evaluate();
  const auto pool = spec.topo.PassiveClients();
  const uint32_t every = spec.training.eval_every;
  for (uint32_t r = 0; r < spec.training.rounds; ++r) {
    const auto dropped = DropoutDraw(spec.training.dropout, r, pool);
    RoundRecord rec;
    rec.outcome = RunRound(session, spec.training.mode, r, dropped);
    const bool last = r + 1 == spec.training.rounds;
    if ((every > 0 && (r + 1) % every == 0) || last) rec.eval = session.Evaluate();
    report.ledger.Snapshot();
    report.rounds.push_back(std::move(rec));
  }
  report.final_eval = report.rounds.empty() ? report.initial : *report.rounds.back().eval;
  report.final_model = session.Model();
  return report;
}

namespace {

nlohmann::json ToJson(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

nlohmann::json CountersJson(const PartyCounters& c, bool times) {
  nlohmann::json j;
  for (size_t t = 0; t < kCostTagCount; ++t) {
    const std::string name(CostTagName(static_cast<CostTag>(t)));
    j["bytes"][name] = c.bytes_sent[t] + c.bytes_recv[t];
    if (times) j["seconds"][name] = c.seconds[t];
  }
  return j;
}

}  // namespace

std::string TrainReport::ToNdjson(bool include_times) const {
  std::ostringstream os;
  nlohmann::json head{{"kind", "header"},
                      {"mode", mode},
                      {"fingerprint", fingerprint},
                      {"rounds", rounds.size()},
                      {"input_widths", input_widths},
                      {"initial_metric", ToJson(initial.metric)},
                      {"initial_loss", ToJson(initial.loss)}};
  os << head.dump() << "\n";
  for (size_t i = 0; i < rounds.size(); ++i) {
    const auto& o = rounds[i].outcome;
    nlohmann::json j{{"kind", "round"},
                     {"round", o.round},
                     {"mode", std::string(RoundModeName(o.mode))},
                     {"served", o.served},
                     {"loss", ToJson(o.loss)},
                     {"batch_metric", ToJson(o.batch_metric)},
                     {"dropped_groups", o.dropped_groups}};
    std::vector<uint32_t> dc;
    for (auto u : o.dropped_clients) dc.push_back(u.value);
    j["dropped_clients"] = dc;
    if (rounds[i].eval) {
      j["test_metric"] = ToJson(rounds[i].eval->metric);
      j["test_loss"] = ToJson(rounds[i].eval->loss);
    }
    if (i < ledger.snapshots().size()) {
      nlohmann::json parties = nlohmann::json::object();
      for (const auto& [id, c] : ledger.snapshots()[i])
        parties[PartyName(id)] = CountersJson(c, include_times);
      j["ledger"] = parties;
    }
    os << j.dump() << "\n";
  }
  return os.str();
}

std::string PartyName(uint32_t id) {
  if (id == kActiveParty.value) return "C0";
  if (id == kServer.value) return "server";
  return "client" + std::to_string(id);
}

std::vector<OverheadRow> LedgerSummary(const OverheadLedger& secure,
                                       const OverheadLedger& baseline) {
  VFS_ENFORCE(secure.snapshots().size() == baseline.snapshots().size(),
              "ledger round counts differ: ", secure.snapshots().size(), " vs ",
              baseline.snapshots().size());
  std::set<uint32_t> ids;
  for (const auto& [id, c] : secure.parties()) ids.insert(id);
  for (const auto& [id, c] : baseline.parties()) ids.insert(id);
  std::vector<OverheadRow> rows;
  for (uint32_t id : ids) {
    const PartyCounters s = secure.Party(id);
    const PartyCounters b = baseline.Party(id);
    OverheadRow r;
    r.party = PartyName(id);
    r.total_bytes = s.TotalBytes();
    r.overhead_bytes = s.OverheadBytes();
    r.baseline_bytes = b.TotalBytes();
    r.total_seconds = s.TotalSeconds();
    r.overhead_seconds = s.OverheadSeconds();
    r.baseline_seconds = b.TotalSeconds();
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string OverheadCsv(const std::vector<OverheadRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "party,total_bytes,overhead_bytes,baseline_bytes,total_seconds,"
        "overhead_seconds,baseline_seconds\n";
  for (const auto& r : rows)
    os << r.party << ',' << r.total_bytes << ',' << r.overhead_bytes << ','
       << r.baseline_bytes << ',' << r.total_seconds << ',' << r.overhead_seconds
       << ',' << r.baseline_seconds << '\n';
  return os.str();
}

std::string Fingerprint(const std::string& canonical) {
  unsigned char out[16];
  crypto_generichash(out, sizeof out,
                     reinterpret_cast<const unsigned char*>(canonical.data()),
                     canonical.size(), nullptr, 0);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned char b : out) {
    s += hex[b >> 4];
    s += hex[b & 15];
  }
  return s;
}

}  // namespace vfedsec
