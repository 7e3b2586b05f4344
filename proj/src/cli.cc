#include "vfedsec/cli.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "vfedsec/ledger.h"

namespace vfedsec {

namespace {

const std::set<std::string> kScalarKeys = {
    "data.source", "data.csv", "data.schema", "data.test_fraction",
    "data.synthetic.rows", "data.synthetic.features", "data.synthetic.class_sep",
    "partition.mode", "partition.random.parts", "partition.clients_per_group",
    "partition.active", "partition.groups", "partition.shard",
    "model.group_width", "model.group_widths", "model.active_hidden",
    "model.group_hidden", "model.head_hidden",
    "train.batch", "train.lr", "train.rounds", "train.rotation_interval",
    "train.eval_every", "train.secure",
    "qcode.t", "qcode.r", "qcode.t_update",
    "dropout.p_round", "dropout.f_clients",
    "run.mode", "run.seed", "run.out"};

std::string JoinSizes(const std::vector<size_t>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string JoinStrings(const std::vector<std::string>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::string Num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

RunConfig RunConfig::FromKeyValues(const KeyValues& kv) {
  size_t n_groups = 0;
  if (kv.Has("partition.groups")) n_groups = kv.GetU64("partition.groups", 0);
  for (const auto& [key, value] : kv.entries()) {
    if (kScalarKeys.count(key)) continue;
    bool group_key = false;
    for (size_t g = 1; g <= n_groups; ++g) {
      const std::string p = "partition.group." + std::to_string(g) + ".";
      group_key = group_key || key == p + "features" || key == p + "clients";
    }
    VFS_ENFORCE_T(ConfigError, group_key, key, ": unknown configuration key");
  }

  RunConfig c;
  c.source = kv.GetString("data.source", c.source);
  c.csv_path = kv.GetString("data.csv", c.csv_path);
  c.schema_path = kv.GetString("data.schema", c.schema_path);
  c.test_fraction = kv.GetDouble("data.test_fraction", c.test_fraction);
  c.synth_rows = kv.GetU64("data.synthetic.rows", c.synth_rows);
  c.synth_features = kv.GetU64("data.synthetic.features", c.synth_features);
  c.synth_class_sep = kv.GetDouble("data.synthetic.class_sep", c.synth_class_sep);

  c.partition_mode = kv.GetString("partition.mode", c.partition_mode);
  c.random_parts = kv.GetU64("partition.random.parts", c.random_parts);
  c.clients_per_group = kv.GetU64("partition.clients_per_group", c.clients_per_group);
  const std::string shard = kv.GetString("partition.shard", "round_robin");
  if (shard == "round_robin") c.shard = ShardRule::kRoundRobin;
  else if (shard == "random") c.shard = ShardRule::kRandom;
  else throw ConfigError("partition.shard: expected round_robin|random, got '" + shard + "'");
  c.explicit_spec.active_features = kv.GetList("partition.active");
  for (size_t g = 1; g <= n_groups; ++g) {
    const std::string p = "partition.group." + std::to_string(g) + ".";
    GroupPartition gp;
    gp.features = kv.GetList(p + "features");
    gp.clients = kv.GetU64(p + "clients", 1);
    c.explicit_spec.groups.push_back(std::move(gp));
  }
  c.explicit_spec.shard = c.shard;

  c.group_width = kv.GetU64("model.group_width", c.group_width);
  c.group_widths = kv.GetSizeList("model.group_widths");
  c.layout.active_hidden = kv.GetSizeList("model.active_hidden");
  c.layout.group_hidden = kv.GetSizeList("model.group_hidden");
  c.layout.head_hidden = kv.GetSizeList("model.head_hidden");

  c.batch = kv.GetU64("train.batch", c.batch);
  c.lr = kv.GetDouble("train.lr", c.lr);
  c.rounds = static_cast<uint32_t>(kv.GetU64("train.rounds", c.rounds));
  c.rotation_interval =
      static_cast<uint32_t>(kv.GetU64("train.rotation_interval", c.rotation_interval));
  c.eval_every = static_cast<uint32_t>(kv.GetU64("train.eval_every", c.eval_every));
  c.secure = kv.GetBool("train.secure", c.secure);

  c.q.t = kv.GetDouble("qcode.t", c.q.t);
  const uint64_t r = kv.GetU64("qcode.r", c.q.r);
  VFS_ENFORCE_T(ConfigError, r <= 0xFFFFFFFFu, "qcode.r: too large");
  c.q.r = static_cast<uint32_t>(r);
  c.q.t_update = kv.GetDouble("qcode.t_update", c.q.t_update);

  c.p_round = kv.GetDouble("dropout.p_round", c.p_round);
  c.f_clients = kv.GetDouble("dropout.f_clients", c.f_clients);

  c.mode = kv.GetString("run.mode", c.mode);
  c.seed = kv.GetU64("run.seed", c.seed);
  c.out_dir = kv.GetString("run.out", c.out_dir);
  c.Validate();
  return c;
}

RunConfig RunConfig::Load(const std::string& path) {
  RunConfig c = FromKeyValues(KeyValues::Load(path));
  // Relative data paths resolve against the config's directory.
  const auto base = std::filesystem::path(path).parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).string();
  };
  resolve(c.csv_path);
  resolve(c.schema_path);
  return c;
}

void RunConfig::Validate() const {
  VFS_ENFORCE_T(ConfigError, source == "synthetic" || source == "csv",
                "data.source: expected synthetic|csv, got '", source, "'");
  if (source == "csv") {
    VFS_ENFORCE_T(ConfigError, !csv_path.empty(), "data.csv: required when data.source = csv");
    VFS_ENFORCE_T(ConfigError, !schema_path.empty(),
                  "data.schema: required when data.source = csv");
  }
  VFS_ENFORCE_T(ConfigError, test_fraction > 0 && test_fraction < 1,
                "data.test_fraction: must be in (0, 1), got ", test_fraction);
  VFS_ENFORCE_T(ConfigError, partition_mode == "random" || partition_mode == "explicit",
                "partition.mode: expected random|explicit, got '", partition_mode, "'");
  if (partition_mode == "random") {
    VFS_ENFORCE_T(ConfigError, random_parts >= 2,
                  "partition.random.parts: need at least 2, got ", random_parts);
  } else {
    VFS_ENFORCE_T(ConfigError, !explicit_spec.groups.empty(),
                  "partition.groups: explicit partition needs at least one group");
  }
  VFS_ENFORCE_T(ConfigError, clients_per_group >= 1,
                "partition.clients_per_group: must be at least 1");
  VFS_ENFORCE_T(ConfigError, group_width >= 1, "model.group_width: must be at least 1");
  for (size_t w : group_widths)
    VFS_ENFORCE_T(ConfigError, w >= 1, "model.group_widths: widths must be positive");
  VFS_ENFORCE_T(ConfigError, batch >= 2, "train.batch: must be at least 2");
  VFS_ENFORCE_T(ConfigError, lr > 0 && std::isfinite(lr), "train.lr: must be positive");
  VFS_ENFORCE_T(ConfigError, rotation_interval >= 1,
                "train.rotation_interval: must be at least 1");
  VFS_ENFORCE_T(ConfigError, mode == "pad" || mode == "discard" || mode == "both",
                "run.mode: expected pad|discard|both, got '", mode, "'");
  q.Validate();
  DropoutModel{p_round, f_clients, seed}.Validate();
}

std::string RunConfig::Canonical() const {
  std::map<std::string, std::string> m;
  m["data.source"] = source;
  m["data.csv"] = csv_path;
  m["data.schema"] = schema_path;
  m["data.test_fraction"] = Num(test_fraction);
  m["data.synthetic.rows"] = std::to_string(synth_rows);
  m["data.synthetic.features"] = std::to_string(synth_features);
  m["data.synthetic.class_sep"] = Num(synth_class_sep);
  m["partition.mode"] = partition_mode;
  m["partition.random.parts"] = std::to_string(random_parts);
  m["partition.clients_per_group"] = std::to_string(clients_per_group);
  m["partition.shard"] = shard == ShardRule::kRandom ? "random" : "round_robin";
  m["partition.active"] = JoinStrings(explicit_spec.active_features);
  m["partition.groups"] = std::to_string(explicit_spec.groups.size());
  for (size_t g = 0; g < explicit_spec.groups.size(); ++g) {
    const std::string p = "partition.group." + std::to_string(g + 1) + ".";
    m[p + "features"] = JoinStrings(explicit_spec.groups[g].features);
    m[p + "clients"] = std::to_string(explicit_spec.groups[g].clients);
  }
  m["model.group_width"] = std::to_string(group_width);
  m["model.group_widths"] = JoinSizes(group_widths);
  m["model.active_hidden"] = JoinSizes(layout.active_hidden);
  m["model.group_hidden"] = JoinSizes(layout.group_hidden);
  m["model.head_hidden"] = JoinSizes(layout.head_hidden);
  m["train.batch"] = std::to_string(batch);
  m["train.lr"] = Num(lr);
  m["train.rounds"] = std::to_string(rounds);
  m["train.rotation_interval"] = std::to_string(rotation_interval);
  m["train.eval_every"] = std::to_string(eval_every);
  m["train.secure"] = secure ? "true" : "false";
  m["qcode.t"] = Num(q.t);
  m["qcode.r"] = std::to_string(q.r);
  m["qcode.t_update"] = Num(q.t_update);
  m["dropout.p_round"] = Num(p_round);
  m["dropout.f_clients"] = Num(f_clients);
  m["run.seed"] = std::to_string(seed);
  std::string s;
  for (const auto& [k, v] : m) s += k + "=" + v + "\n";
  return s;
}

SplitTable LoadData(const RunConfig& cfg) {
  const uint64_t split_seed = DeriveSeed(cfg.seed, Stream::kSplit);
  if (cfg.source == "csv")
    return LoadCsv(cfg.csv_path, CsvSchema::Load(cfg.schema_path), cfg.test_fraction,
                   split_seed);
  Rng rng = MakeRng(cfg.seed, Stream::kSynth);
  const Table t = Synthesize(cfg.synth_rows, cfg.synth_features, cfg.synth_class_sep, rng);
  return TrainTestSplit(t, cfg.test_fraction, split_seed);
}

ExperimentSpec BuildExperiment(const RunConfig& cfg, const SplitTable& data,
                               DropMode mode) {
  PartitionSpec spec;
  if (cfg.partition_mode == "random") {
    Rng rng = MakeRng(cfg.seed, Stream::kPartition, {0});
    spec = RandomFeaturePartition(data.train, cfg.random_parts, rng);
    for (auto& g : spec.groups) g.clients = cfg.clients_per_group;
    spec.shard = cfg.shard;
  } else {
    spec = cfg.explicit_spec;
  }
  Rng train_rng = MakeRng(cfg.seed, Stream::kPartition, {1});
  Rng test_rng = MakeRng(cfg.seed, Stream::kPartition, {2});
  const PartitionViews train_views = Partition(data.train, spec, train_rng);
  const PartitionViews test_views = Partition(data.test, spec, test_rng);

  std::vector<size_t> widths = cfg.group_widths;
  if (widths.empty()) widths.assign(spec.groups.size(), cfg.group_width);

  ExperimentSpec e;
  e.topo = Topology::Build(train_views, test_views, widths);
  e.layout = cfg.layout;
  e.layout.outputs = data.train.n_classes > 2 ? static_cast<size_t>(data.train.n_classes) : 1;
  e.protocol.q = cfg.q;
  e.protocol.batch = cfg.batch;
  e.protocol.lr = cfg.lr;
  e.protocol.rotation_interval = cfg.rotation_interval;
  e.protocol.secure = cfg.secure;
  e.protocol.master_seed = cfg.seed;
  e.protocol.task = data.train.n_classes > 2 ? Task::kMulticlass : Task::kBinary;
  e.training.rounds = cfg.rounds;
  e.training.eval_every = cfg.eval_every;
  e.training.mode = mode;
  e.training.dropout = DropoutModel{cfg.p_round, cfg.f_clients, cfg.seed};
  return e;
}

namespace {

void WriteFile(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  VFS_ENFORCE_T(ConfigError, f, "run.out: cannot write '", p.string(), "'");
  f << text;
}

int CmdTrain(RunConfig cfg, std::ostream& out) {
  const SplitTable data = LoadData(cfg);
  std::vector<DropMode> modes;
  if (cfg.mode == "pad" || cfg.mode == "both") modes.push_back(DropMode::kPad);
  if (cfg.mode == "discard" || cfg.mode == "both") modes.push_back(DropMode::kDiscard);
  const std::string fp = cfg.ConfigFingerprint();
  std::filesystem::create_directories(cfg.out_dir);
  WriteFile(std::filesystem::path(cfg.out_dir) / "config.resolved", cfg.Canonical());

  for (DropMode mode : modes) {
    const ExperimentSpec spec = BuildExperiment(cfg, data, mode);
    const TrainReport secure = RunTraining(spec, data, fp);
    ExperimentSpec plain_spec = spec;
    plain_spec.protocol.secure = false;
    const TrainReport baseline = RunTraining(plain_spec, data, fp);

    const auto dir = std::filesystem::path(cfg.out_dir) / std::string(DropModeName(mode));
    std::filesystem::create_directories(dir);
    WriteFile(dir / "rounds.ndjson", secure.ToNdjson());
    WriteFile(dir / "baseline_rounds.ndjson", baseline.ToNdjson());
    const auto rows = spec.protocol.secure ? LedgerSummary(secure.ledger, baseline.ledger)
                                           : LedgerSummary(baseline.ledger, baseline.ledger);
    WriteFile(dir / "summary.csv", OverheadCsv(rows));
    WriteCheckpointFile((dir / "checkpoint.bin").string(), secure.final_model);

    out << "mode=" << DropModeName(mode) << " fingerprint=" << fp
        << " rounds=" << secure.rounds.size()
        << " initial_metric=" << secure.initial.metric
        << " final_metric=" << secure.final_eval.metric
        << " baseline_final_metric=" << baseline.final_eval.metric << "\n";
    out << OverheadCsv(rows);
  }
  return 0;
}

int CmdEval(const RunConfig& cfg, const std::string& checkpoint, std::ostream& out) {
  const SplitTable data = LoadData(cfg);
  const ExperimentSpec spec = BuildExperiment(cfg, data, DropMode::kPad);
  SplitModel model = ReadCheckpointFile(checkpoint);
  Session session(spec.topo, data.train, data.test, std::move(model), spec.protocol);
  const EvalResult r = session.Evaluate();
  out << (spec.protocol.task == Task::kBinary ? "auc=" : "accuracy=") << r.metric
      << " loss=" << r.loss << " rows=" << r.rows << "\n";
  return 0;
}

struct Stats {
  double mean = 0;
  double sd = 0;
};

Stats MeanSd(const std::vector<double>& v) {
  Stats s;
  for (double x : v) s.mean += x;
  s.mean /= v.size();
  for (double x : v) s.sd += (x - s.mean) * (x - s.mean);
  s.sd = v.size() > 1 ? std::sqrt(s.sd / (v.size() - 1)) : 0.0;
  return s;
}

int CmdBenchMask(size_t rows, size_t inner, size_t cols, size_t trials,
                 uint64_t seed, std::ostream& out) {
  VFS_ENFORCE_T(ConfigError, trials >= 1, "--trials: must be at least 1");
  VFS_ENFORCE_T(ConfigError, rows >= 1 && inner >= 1 && cols >= 1,
                "--shape: dimensions must be positive");
  Rng rng = MakeRng(seed, Stream::kInit);
  RealMatrix x(rows, inner), w(inner, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 2 * Uniform01(rng) - 1;
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 2 * Uniform01(rng) - 1;
  const QConfig q;
  std::map<ParticipantId, KeyPair> keys{{kActiveParty, EpochKeypair(seed, 0, kActiveParty)},
                                        {ParticipantId{1}, EpochKeypair(seed, 0, {1})}};
  const PairPool pool = PairPool::Build(1, {kActiveParty, {1}}, 0, keys);

  // Each trial times `kInner` back-to-back repetitions of both paths.
  constexpr int kInner = 50;
  std::vector<double> plain_t, masked_t;
  volatile double sink = 0;
  const QMatrix zero_share(rows, cols, q.r / 2);
  for (size_t t = 0; t < trials; ++t) {
    double t0 = CpuSeconds();
    for (int k = 0; k < kInner; ++k) {
      const RealMatrix y = x * w;
      sink = sink + y(0, 0);
    }
    plain_t.push_back(std::max(0.0, CpuSeconds() - t0 - TimerFloor()) / kInner);

    Rng rr = MakeRng(seed, Stream::kRounding, {t});
    t0 = CpuSeconds();
    for (int k = 0; k < kInner; ++k) {
      const RealMatrix y = x * w;
      const NoiseTag tag{0, static_cast<uint32_t>(t * kInner + k), Phase::kForwardEmbedding,
                         0, rows, cols};
      std::vector<QMatrix> parts;
      parts.push_back(MaskTensor(QuantizeMatrix(y, q, rr), SelfNoise(kActiveParty, pool, tag)));
      parts.push_back(MaskTensor(zero_share, SelfNoise({1}, pool, tag)));
      const RealMatrix back = DequantizeSum(UnmaskAggregate(parts, true), 2, q);
      sink = sink + back(0, 0);
    }
    masked_t.push_back(std::max(0.0, CpuSeconds() - t0 - TimerFloor()) / kInner);
  }
  const Stats p = MeanSd(plain_t), m = MeanSd(masked_t);
  out.precision(6);
  out << "path,mean_seconds,sd_seconds,trials\n";
  out << "plaintext_matmul," << p.mean << ',' << p.sd << ',' << trials << "\n";
  out << "masked_matmul," << m.mean << ',' << m.sd << ',' << trials << "\n";
  out << "homomorphic,out_of_scope,out_of_scope," << trials << "\n";
  out << "# shape (" << rows << ", " << inner << ") x (" << inner << ", " << cols
      << "); masked/plain ratio " << (p.mean > 0 ? m.mean / p.mean : 0.0) << "\n";
  return 0;
}

}  // namespace

int RunCli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Secure vertical federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path, mode, out_dir, checkpoint;
  uint64_t seed = 0;
  uint32_t rounds = 0;
  bool synthetic = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run config file (dotted key = value)");
    sub->add_option("--seed", seed, "Master seed (overrides config and VFEDSEC_SEED)");
    sub->add_flag("--synthetic", synthetic, "Use the built-in synthetic dataset");
  };
  CLI::App* train = app.add_subcommand("train", "Train and write reports");
  add_common(train);
  train->add_option("--mode", mode, "pad | discard | both")
      ->check(CLI::IsMember({"pad", "discard", "both"}));
  train->add_option("--out", out_dir, "Output directory");
  train->add_option("--rounds", rounds, "Number of training rounds");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

  size_t b_rows = 256, b_inner = 8, b_cols = 8, trials = 10;
  CLI::App* bench = app.add_subcommand("bench-mask", "Masked vs plaintext matmul timing");
  bench->add_option("--rows", b_rows, "Batch rows (default 256)");
  bench->add_option("--inner", b_inner, "Inner dimension (default 8)");
  bench->add_option("--cols", b_cols, "Output columns (default 8)");
  bench->add_option("--trials", trials, "Repetitions (default 10)");
  bench->add_option("--seed", seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (bench->parsed()) return CmdBenchMask(b_rows, b_inner, b_cols, trials, seed, out);

    RunConfig cfg;
    if (!config_path.empty()) cfg = RunConfig::Load(config_path);
    if (synthetic) {
      cfg.source = "synthetic";
      cfg.partition_mode = "random";
    }
    if (const char* env = std::getenv("VFEDSEC_SEED")) {
      KeyValues kv;
      kv.Set("VFEDSEC_SEED", env);
      cfg.seed = kv.GetU64("VFEDSEC_SEED", cfg.seed);
    }
    CLI::App* sub = train->parsed() ? train : eval;
    if (sub->count("--seed")) cfg.seed = seed;
    if (train->parsed()) {
      if (!mode.empty()) cfg.mode = mode;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (train->count("--rounds")) cfg.rounds = rounds;
      cfg.Validate();
      return CmdTrain(cfg, out);
    }
    cfg.Validate();
    return CmdEval(cfg, checkpoint, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace vfedsec
