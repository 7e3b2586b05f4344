#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vfedsec/datahub.h"
#include "vfedsec/kvfile.h"
#include "vfedsec/simharness.h"

namespace vfedsec {

// Every recognised key of a run config; see configs/README.md.
struct RunConfig {
  // data.*
  std::string source = "synthetic";  // synthetic | csv
  std::string csv_path;
  std::string schema_path;
  double test_fraction = 0.2;
  size_t synth_rows = 4000;
  size_t synth_features = 20;
  double synth_class_sep = 0.6;

  // partition.*
  std::string partition_mode = "random";  // random | explicit
  size_t random_parts = 3;
  size_t clients_per_group = 1;
  PartitionSpec explicit_spec;
  ShardRule shard = ShardRule::kRoundRobin;

  // model.*
  std::vector<size_t> group_widths;  // empty: model.group_width for all
  size_t group_width = 8;
  ModelLayout layout;

  // train.*
  size_t batch = 256;
  double lr = 0.01;
  uint32_t rounds = 50;
  uint32_t rotation_interval = 5;
  uint32_t eval_every = 10;
  bool secure = true;

  // qcode.*
  QConfig q;

  // dropout.*
  double p_round = 0.0;
  double f_clients = 0.1;

  // run.*
  std::string mode = "pad";  // pad | discard | both
  uint64_t seed = 1;
  std::string out_dir = "out";

  // Unknown keys and bad values throw ConfigError naming the key.
  static RunConfig FromKeyValues(const KeyValues& kv);
  static RunConfig Load(const std::string& path);

  // Checks value ranges that do not depend on the data.
  void Validate() const;

  // Sorted key=value rendering of every field.
  std::string Canonical() const;
  std::string ConfigFingerprint() const { return Fingerprint(Canonical()); }
};

// Loads or synthesizes the dataset and splits it.
SplitTable LoadData(const RunConfig& cfg);

// Partition, topology, layout and protocol settings for one drop mode.
ExperimentSpec BuildExperiment(const RunConfig& cfg, const SplitTable& data,
                               DropMode mode);

// Entry point of the command-line tool. Returns the process exit code:
// 0 success, 2 configuration error, 3 protocol/runtime error.
int RunCli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace vfedsec
