#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>

#include "experiments.h"
#include "oracles.h"
#include "vfedsec/simharness.h"

namespace vfedsec {
namespace {

std::vector<ParticipantId> Pool(uint32_t n) {
  std::vector<ParticipantId> v;
  for (uint32_t i = 1; i <= n; ++i) v.push_back({i});
  return v;
}

TEST(DropoutDraw, NeverWhenProbabilityZero) {
  const DropoutModel m{0.0, 0.5, 3};
  const auto pool = Pool(10);
  for (uint32_t r = 0; r < 200; ++r) EXPECT_TRUE(DropoutDraw(m, r, pool).empty());
}

TEST(DropoutDraw, CountRule) {
  const auto pool = Pool(20);
  for (uint32_t r = 0; r < 50; ++r) {
    const auto d = DropoutDraw(DropoutModel{1.0, 0.1, 7}, r, pool);
    EXPECT_EQ(d.size(), 2u);
    for (auto u : d) EXPECT_TRUE(u.value >= 1 && u.value <= 20);
  }
  EXPECT_EQ(DropoutDraw(DropoutModel{1.0, 0.01, 1}, 0, Pool(5)).size(), 1u);
  EXPECT_EQ(DropoutCount(0.25, 10), 3u);
  EXPECT_EQ(DropoutCount(0.24, 10), 2u);
  EXPECT_EQ(DropoutCount(1.0, 4), 4u);
  EXPECT_THROW(DropoutDraw(DropoutModel{1.0, 0.1, 1}, 0, {}), Error);
}

TEST(DropoutDraw, DeterministicAndIndependentAcrossRounds) {
  const DropoutModel m{0.3, 0.2, 11};
  const auto pool = Pool(10);
  size_t hit = 0;
  std::vector<size_t> per_client(11, 0);
  const uint32_t rounds = 4000;
  for (uint32_t r = 0; r < rounds; ++r) {
    const auto d = DropoutDraw(m, r, pool);
    EXPECT_EQ(d, DropoutDraw(m, r, pool));
    if (!d.empty()) ++hit;
    for (auto u : d) ++per_client[u.value];
  }
  const double p = static_cast<double>(hit) / rounds;
  EXPECT_NEAR(p, 0.3, 4 * std::sqrt(0.3 * 0.7 / rounds));
  // Each client is in a triggered draw with probability 2/10.
  for (uint32_t u = 1; u <= 10; ++u)
    EXPECT_NEAR(static_cast<double>(per_client[u]) / hit, 0.2, 0.04) << u;
  EXPECT_NE(DropoutDraw(DropoutModel{1.0, 0.2, 11}, 0, pool),
            DropoutDraw(DropoutModel{1.0, 0.2, 12}, 0, pool));
}

TEST(DropoutModel, Validation) {
  EXPECT_THROW((DropoutModel{1.5, 0.1, 0}.Validate()), ConfigError);
  EXPECT_THROW((DropoutModel{0.5, 0.0, 0}.Validate()), ConfigError);
  try {
    DropoutModel{0.5, 2.0, 0}.Validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("dropout.f_clients", 0), 0u);
  }
}

struct Small {
  RunConfig cfg;
  SplitTable data;
  ExperimentSpec spec;
};

Small MakeSmall(size_t parts = 5, size_t clients = 1, uint64_t seed = 2) {
  Small s;
  s.cfg.synth_rows = 600;
  s.cfg.synth_features = 10;
  s.cfg.random_parts = parts;
  s.cfg.clients_per_group = clients;
  s.cfg.batch = 32;
  s.cfg.lr = 0.05;
  s.cfg.rounds = 10;
  s.cfg.eval_every = 5;
  s.cfg.seed = seed;
  s.data = LoadData(s.cfg);
  s.spec = BuildExperiment(s.cfg, s.data, DropMode::kPad);
  return s;
}

Session MakeSession(const Small& s, OverheadLedger* ledger = nullptr) {
  return Session(s.spec.topo, s.data.train, s.data.test,
                 InitSplitModel(s.spec.topo, s.spec.layout, s.cfg.seed), s.spec.protocol,
                 ledger);
}

TEST(RunRound, NoDropoutSameUnderBothModes) {
  const Small s = MakeSmall();
  Session a = MakeSession(s), b = MakeSession(s);
  for (uint32_t r = 0; r < 3; ++r) {
    const RoundOutcome oa = RunRound(a, DropMode::kPad, r, {});
    const RoundOutcome ob = RunRound(b, DropMode::kDiscard, r, {});
    EXPECT_EQ(oa.loss, ob.loss);
    EXPECT_EQ(oa.mode, RoundMode::kClean);
    EXPECT_EQ(ob.mode, RoundMode::kClean);
  }
  EXPECT_EQ(a.StateBytes(), b.StateBytes());
}

TEST(RunRound, DiscardLeavesStateUntouched) {
  const Small s = MakeSmall(3, 2);
  Session a = MakeSession(s);
  RunRound(a, DropMode::kDiscard, 0, {});
  const Bytes before = a.StateBytes();
  a.transport().set_capture(true);
  const RoundOutcome o = RunRound(a, DropMode::kDiscard, 1, {ParticipantId{3}});
  EXPECT_FALSE(o.served);
  EXPECT_EQ(o.mode, RoundMode::kDiscard);
  EXPECT_EQ(o.dropped_groups, std::vector<int>{2});
  EXPECT_TRUE(std::isnan(o.loss));
  EXPECT_EQ(a.StateBytes(), before);
  EXPECT_TRUE(a.transport().captured().empty());
}

TEST(RunRound, PadTrainsSurvivingSegments) {
  const Small s = MakeSmall(5, 1);
  ASSERT_EQ(s.spec.topo.groups.size(), 4u);
  Session a = MakeSession(s);
  RunRound(a, DropMode::kPad, 0, {});
  const SplitModel before = a.Model();
  const RoundOutcome o = RunRound(a, DropMode::kPad, 1, {ParticipantId{2}});
  EXPECT_TRUE(o.served);
  EXPECT_EQ(o.mode, RoundMode::kPad);
  EXPECT_EQ(o.dropped_groups, std::vector<int>{2});
  EXPECT_TRUE(std::isfinite(o.loss));
  const SplitModel after = a.Model();
  for (size_t g = 0; g < 4; ++g) {
    const bool same = after.group_bottoms[g].FlatParams() == before.group_bottoms[g].FlatParams();
    EXPECT_EQ(same, g == 1) << g;
  }
}

TEST(RunRound, PadWithEveryGroupHitIsDiscarded) {
  const Small s = MakeSmall(3, 1);
  Session a = MakeSession(s);
  const Bytes before = a.StateBytes();
  const RoundOutcome o = RunRound(a, DropMode::kPad, 0, {ParticipantId{1}, ParticipantId{2}});
  EXPECT_FALSE(o.served);
  EXPECT_EQ(o.mode, RoundMode::kDiscard);
  EXPECT_EQ(a.StateBytes(), before);
}

// Property: discard rounds are pure over a forced-dropout schedule.
TEST(SimharnessProperty, DiscardPurity) {
  const Small s = MakeSmall(4, 2, 5);
  Session a = MakeSession(s);
  const auto pool = s.spec.topo.PassiveClients();
  const DropoutModel m{0.5, 0.2, 9};
  size_t dropped_rounds = 0;
  for (uint32_t r = 0; r < 20; ++r) {
    const auto d = DropoutDraw(m, r, pool);
    const Bytes before = a.StateBytes();
    RunRound(a, DropMode::kDiscard, r, d);
    if (!d.empty()) {
      ++dropped_rounds;
      EXPECT_EQ(a.StateBytes(), before) << r;
    } else {
      EXPECT_NE(a.StateBytes(), before) << r;
    }
  }
  EXPECT_GT(dropped_rounds, 0u);
}

TEST(RunTraining, ZeroRoundsReportsInitialOnly) {
  Small s = MakeSmall();
  s.spec.training.rounds = 0;
  const TrainReport r = RunTraining(s.spec, s.data, "fp");
  EXPECT_TRUE(r.rounds.empty());
  EXPECT_EQ(r.final_eval.metric, r.initial.metric);
  EXPECT_EQ(r.MetricAfter(0), r.initial.metric);
  EXPECT_FALSE(r.MetricAfter(1).has_value());
  const std::string nd = r.ToNdjson();
  EXPECT_EQ(std::count(nd.begin(), nd.end(), '\n'), 1);
  EXPECT_NE(nd.find("\"fingerprint\":\"fp\""), std::string::npos);
}

TEST(RunTraining, DeterministicReports) {
  Small s = MakeSmall(4, 2);
  s.spec.training.dropout = DropoutModel{0.4, 0.2, 3};
  const TrainReport a = RunTraining(s.spec, s.data, "x");
  const TrainReport b = RunTraining(s.spec, s.data, "x");
  EXPECT_EQ(a.ToNdjson(false), b.ToNdjson(false));
  EXPECT_EQ(SaveCheckpoint(a.final_model), SaveCheckpoint(b.final_model));
  EXPECT_EQ(a.rounds.size(), 10u);
  EXPECT_TRUE(a.MetricAfter(5).has_value());
  EXPECT_FALSE(a.MetricAfter(4).has_value());
  EXPECT_EQ(a.ledger.snapshots().size(), 10u);
}

TEST(RunTraining, SeparableDataReachesHighMetric) {
  RunConfig c = experiments::SurrogateConfig();
  c.random_parts = 3;
  const SplitTable data = LoadData(c);
  const TrainReport r = RunTraining(BuildExperiment(c, data, DropMode::kPad), data);
  EXPECT_GT(SyntheticBayesAuc(c.synth_class_sep, c.synth_features), 0.99);
  EXPECT_GE(r.final_eval.metric, 0.95);
}

TEST(SimharnessProperty, PadDominatesDiscard) {
  RunConfig c = experiments::SurrogateConfig();
  c.rounds = 30;
  c.p_round = 0.4;
  const SplitTable data = LoadData(c);
  const TrainReport pad = RunTraining(BuildExperiment(c, data, DropMode::kPad), data);
  const TrainReport discard = RunTraining(BuildExperiment(c, data, DropMode::kDiscard), data);
  EXPECT_GE(*pad.MetricAfter(30), *discard.MetricAfter(30));
  size_t skipped = 0;
  for (const auto& rec : discard.rounds) skipped += !rec.outcome.served;
  EXPECT_GT(skipped, 0u);
}

TEST(Ledger, CountersMonotoneAcrossSnapshots) {
  Small s = MakeSmall(3, 2);
  const TrainReport r = RunTraining(s.spec, s.data);
  const auto& snaps = r.ledger.snapshots();
  for (size_t i = 1; i < snaps.size(); ++i)
    for (const auto& [id, c] : snaps[i]) {
      const auto prev = snaps[i - 1].find(id);
      if (prev == snaps[i - 1].end()) continue;
      for (size_t t = 0; t < kCostTagCount; ++t) {
        EXPECT_GE(c.bytes_sent[t], prev->second.bytes_sent[t]);
        EXPECT_GE(c.bytes_recv[t], prev->second.bytes_recv[t]);
        EXPECT_GE(c.seconds[t], prev->second.seconds[t]);
      }
    }
}

TEST(LedgerSummary, UnsecuredRunHasNoOverhead) {
  Small s = MakeSmall(3, 2);
  s.spec.protocol.secure = false;
  const TrainReport plain = RunTraining(s.spec, s.data);
  const auto rows = LedgerSummary(plain.ledger, plain.ledger);
  ASSERT_FALSE(rows.empty());
  for (const auto& row : rows) {
    EXPECT_EQ(row.overhead_bytes, 0u) << row.party;
    EXPECT_EQ(row.overhead_seconds, 0.0) << row.party;
    EXPECT_EQ(row.total_bytes, row.baseline_bytes);
  }
  s.spec.protocol.secure = true;
  const TrainReport secure = RunTraining(s.spec, s.data);
  const auto srows = LedgerSummary(secure.ledger, plain.ledger);
  for (const auto& row : srows) EXPECT_GT(row.overhead_bytes, 0u) << row.party;
  // Sealed id lists count wholly as overhead; tensor payloads keep equal shapes.
  for (const auto& row : srows) {
    EXPECT_LE(row.total_bytes - row.overhead_bytes, row.baseline_bytes) << row.party;
    EXPECT_GT(row.total_bytes, row.baseline_bytes) << row.party;
  }
  const std::string csv = OverheadCsv(srows);
  EXPECT_EQ(csv.rfind("party,total_bytes,overhead_bytes,baseline_bytes,", 0), 0u);
  EXPECT_NE(csv.find("\nC0,"), std::string::npos);
  s.spec.training.rounds = 3;
  EXPECT_THROW(LedgerSummary(RunTraining(s.spec, s.data).ledger, plain.ledger), Error);
}

TEST(PartyName, Names) {
  EXPECT_EQ(PartyName(kActiveParty.value), "C0");
  EXPECT_EQ(PartyName(kServer.value), "server");
  EXPECT_EQ(PartyName(7), "client7");
  EXPECT_EQ(Fingerprint("a"), Fingerprint("a"));
  EXPECT_NE(Fingerprint("a"), Fingerprint("b"));
}

// Property: per-client overhead bytes are affine in (N, B); server
// broadcast is proportional to N * B.
TEST(SimharnessProperty, OverheadBytesScaling) {
  Eigen::MatrixXd affine(6, 3), prop(6, 1);
  Eigen::VectorXd client(6), server(6);
  int i = 0;
  for (size_t n : {4, 8, 16})
    for (size_t b : {64, 256}) {
      const auto p = experiments::MeasureScaling(n, b, 5);
      affine.row(i) << 1.0, static_cast<double>(n), static_cast<double>(b);
      prop(i, 0) = static_cast<double>(n * b);
      client(i) = p.client_overhead;
      server(i) = p.server_broadcast;
      ++i;
    }
  EXPECT_LT(experiments::FitResidualRatio(affine, client), 0.05);
  EXPECT_LT(experiments::FitResidualRatio(prop, server), 0.05);
  EXPECT_GT(client(5), client(0));
}

// Mask generation time fits a + b * (B * H * N) + c * B.
TEST(SimharnessProperty, MaskComputeScaling) {
  const size_t width = 8;
  Eigen::MatrixXd x(6, 3);
  Eigen::VectorXd y(6);
  int i = 0;
  for (size_t n : {4, 8, 16})
    for (size_t b : {64, 256}) {
      std::vector<ParticipantId> members{kActiveParty};
      std::map<ParticipantId, KeyPair> keys{{kActiveParty, EpochKeypair(1, 0, kActiveParty)}};
      for (uint32_t u = 1; u <= n; ++u) {
        members.push_back({u});
        keys.emplace(ParticipantId{u}, EpochKeypair(1, 0, {u}));
      }
      const PairPool pool = PairPool::Build(1, members, 0, keys);
      double best = 1e30;
      for (int rep = 0; rep < 9; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        for (uint32_t k = 0; k < 20; ++k)
          SelfNoise(ParticipantId{1}, pool, NoiseTag{0, k, Phase::kForwardEmbedding, 0, b, width});
        best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                                  .count());
      }
      x.row(i) << 1.0, static_cast<double>(b * width * n), static_cast<double>(b);
      y(i) = best;
      ++i;
    }
  EXPECT_LT(experiments::FitResidualRatio(x, y), 0.15);
}

}  // namespace
}  // namespace vfedsec
