#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vfedsec/datahub.h"
#include "vfedsec/ledger.h"
#include "vfedsec/protocol.h"

namespace vfedsec {

struct DropoutModel {
  double p_round = 0.0;    // chance that a round has any dropout
  double f_clients = 0.1;  // fraction of passive clients dropping then
  uint64_t seed = 0;

  void Validate() const;
};

// max(1, round_half_up(f * pool)), capped at pool.
size_t DropoutCount(double f_clients, size_t pool);

// Independent per round: with probability p_round, a uniform subset of
// DropoutCount() clients; otherwise empty.
std::set<ParticipantId> DropoutDraw(const DropoutModel& m, uint32_t round,
                                    std::span<const ParticipantId> pool);

enum class DropMode { kPad, kDiscard };
std::string_view DropModeName(DropMode m);

// discard + any dropout: nothing runs. pad: groups with a dropped member are
// padded; if every group lost a member the round is discarded instead.
RoundOutcome RunRound(Session& session, DropMode mode, uint32_t round,
                      const std::set<ParticipantId>& dropped);

struct TrainingConfig {
  uint32_t rounds = 50;
  // Evaluate after every `eval_every` rounds; 0 evaluates only at the end.
  uint32_t eval_every = 10;
  DropMode mode = DropMode::kPad;
  DropoutModel dropout;
};

struct ExperimentSpec {
  Topology topo;
  ModelLayout layout;
  ProtocolConfig protocol;
  TrainingConfig training;
};

struct RoundRecord {
  RoundOutcome outcome;
  std::optional<EvalResult> eval;
};

struct TrainReport {
  std::string mode;
  std::string fingerprint;
  // Encoded input width of the active party, then of each group.
  std::vector<size_t> input_widths;
  EvalResult initial;
  std::vector<RoundRecord> rounds;
  EvalResult final_eval;
  OverheadLedger ledger;
  SplitModel final_model;

  // Test metric after `round` rounds (1-based), if evaluated then.
  std::optional<double> MetricAfter(uint32_t round) const;

  // One JSON object per line: a header, then one per round. Timings are
  // omitted when include_times is false, which makes equal-fingerprint runs
  // byte-identical.
  std::string ToNdjson(bool include_times = true) const;
};

// Builds the session with InitSplitModel and runs every round. Rounds = 0
// yields the initialization evaluation only.
TrainReport RunTraining(const ExperimentSpec& spec, const SplitTable& data,
                        const std::string& fingerprint = "");

struct OverheadRow {
  std::string party;
  uint64_t total_bytes = 0;
  uint64_t overhead_bytes = 0;
  uint64_t baseline_bytes = 0;  // same party in the unsecured run
  double total_seconds = 0;
  double overhead_seconds = 0;
  double baseline_seconds = 0;
};

// Per-party totals and secure-layer overhead, paired with the unsecured
// baseline. Throws Error when the ledgers cover different round counts.
std::vector<OverheadRow> LedgerSummary(const OverheadLedger& secure,
                                       const OverheadLedger& baseline);
std::string OverheadCsv(const std::vector<OverheadRow>& rows);

// "C0", "server", or "client<id>".
std::string PartyName(uint32_t id);

// Hex digest of arbitrary canonical text.
std::string Fingerprint(const std::string& canonical);

}  // namespace vfedsec
