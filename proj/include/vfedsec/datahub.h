#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vfedsec/common.h"

namespace vfedsec {

enum class ColumnKind { kNumeric, kCategorical, kIgnore };

// One source feature and the encoded columns [col_begin, col_end) it occupies.
struct Feature {
  std::string name;
  ColumnKind kind = ColumnKind::kNumeric;
  size_t col_begin = 0;
  size_t col_end = 0;
  std::vector<std::string> levels;  // categorical only, sorted

  size_t width() const { return col_end - col_begin; }
};

struct Table {
  std::vector<Feature> features;
  RealMatrix x;
  std::vector<int> labels;
  int n_classes = 2;
  // Source row number of every sample. Never handed to the model; used only
  // to check that vertical views stay aligned.
  std::vector<uint64_t> provenance;

  size_t rows() const { return static_cast<size_t>(x.rows()); }
  const Feature& feature(const std::string& name) const;
  std::vector<std::string> FeatureNames() const;
  // Encoded column indices for the named features, in the given order.
  std::vector<size_t> Columns(const std::vector<std::string>& names) const;
};

struct SplitTable {
  Table train;
  Table test;
};

// Column kinds plus label handling, read from a "key = value" schema file:
//   label = y
//   label.positive = yes          (optional; binary target)
//   delimiter = ;                 (optional; default ',')
//   column.age = numeric
//   column.job = categorical
//   column.duration = ignore
struct CsvSchema {
  std::vector<std::pair<std::string, ColumnKind>> columns;
  std::string label;
  std::string positive_label;
  char delimiter = ',';

  static CsvSchema Parse(const std::string& text);
  static CsvSchema Load(const std::string& path);
};

// Reads a headered CSV, drops rows with empty or "?" cells, splits train/test
// with a seeded shuffle, one-hot encodes categoricals with train-split levels
// and standardizes numerics with train-split statistics. Parse errors report
// the 1-based line and column name.
SplitTable LoadCsv(const std::string& path, const CsvSchema& schema,
                   double test_fraction, uint64_t seed);
SplitTable LoadCsvText(const std::string& text, const CsvSchema& schema,
                       double test_fraction, uint64_t seed);

// Seeded split of an already-encoded table; numeric features of both halves
// are standardized with the train half's mean and population std.
SplitTable TrainTestSplit(const Table& table, double test_fraction,
                          uint64_t seed);

// Two equiprobable classes, x | y ~ N(+-(class_sep/2) * 1_d, I). The Bayes
// score is sum(x); its AUC is Phi(class_sep * sqrt(d/2)) and its accuracy is
// Phi(class_sep * sqrt(d) / 2).
Table Synthesize(size_t n_rows, size_t n_features, double class_sep, Rng& rng);
double SyntheticBayesAuc(double class_sep, size_t n_features);
double SyntheticBayesAccuracy(double class_sep, size_t n_features);

enum class ShardRule { kRoundRobin, kRandom };

struct GroupPartition {
  std::vector<std::string> features;
  size_t clients = 1;
};

struct PartitionSpec {
  std::vector<std::string> active_features;
  std::vector<GroupPartition> groups;
  ShardRule shard = ShardRule::kRoundRobin;

  // Throws ConfigError on unknown, overlapping, or uncovered features and on
  // empty groups.
  void Validate(const Table& table) const;
};

struct PartitionViews {
  std::vector<size_t> active_cols;
  std::vector<std::vector<size_t>> group_cols;
  // shards[group][client] = sorted sample indices held by that client.
  std::vector<std::vector<std::vector<size_t>>> shards;
};

PartitionViews Partition(const Table& table, const PartitionSpec& spec, Rng& rng);

// Shuffles features into n_parts near-equal parts: part 0 stays with the
// active party, every other part is a single-client group.
PartitionSpec RandomFeaturePartition(const Table& table, size_t n_parts, Rng& rng);

// Deterministic text listing of feature and shard assignments.
std::string PartitionManifest(const Table& table, const PartitionSpec& spec,
                              const PartitionViews& views);

}  // namespace vfedsec
