#include "vfedsec/datahub.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "vfedsec/kvfile.h"

namespace vfedsec {

const Feature& Table::feature(const std::string& name) const {
  for (const auto& f : features)
    if (f.name == name) return f;
  throw ConfigError("unknown feature '" + name + "'");
}

std::vector<std::string> Table::FeatureNames() const {
  std::vector<std::string> out;
  for (const auto& f : features) out.push_back(f.name);
  return out;
}

std::vector<size_t> Table::Columns(const std::vector<std::string>& names) const {
  std::vector<size_t> cols;
  for (const auto& n : names) {
    const Feature& f = feature(n);
    for (size_t c = f.col_begin; c < f.col_end; ++c) cols.push_back(c);
  }
  return cols;
}

CsvSchema CsvSchema::Parse(const std::string& text) {
  const KeyValues kv = KeyValues::Parse(text, "schema");
  CsvSchema s;
  s.label = kv.RequireString("label");
  s.positive_label = kv.GetString("label.positive", "");
  const std::string delim = kv.GetString("delimiter", ",");
  VFS_ENFORCE_T(ConfigError, delim.size() == 1,
                "delimiter: expected one character, got '", delim, "'");
  s.delimiter = delim[0];
  for (const auto& key : kv.KeysWithPrefix("column")) {
    const std::string name = key.substr(7);
    const std::string kind = kv.GetString(key, "");
    ColumnKind k;
    if (kind == "numeric") k = ColumnKind::kNumeric;
    else if (kind == "categorical") k = ColumnKind::kCategorical;
    else if (kind == "ignore") k = ColumnKind::kIgnore;
    else throw ConfigError(key + ": unknown column kind '" + kind + "'");
    s.columns.emplace_back(name, k);
  }
  VFS_ENFORCE_T(ConfigError, !s.columns.empty(), "schema declares no columns");
  return s;
}

CsvSchema CsvSchema::Load(const std::string& path) {
  std::ifstream in(path);
  VFS_ENFORCE_T(ConfigError, in, "cannot read schema '", path, "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return Parse(ss.str());
}

namespace {

std::vector<std::string> SplitCsvLine(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      out.push_back(Trim(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(Trim(cur));
  return out;
}

bool IsMissing(const std::string& cell) { return cell.empty() || cell == "?"; }

// Indices [0, n) split by a seeded shuffle; both halves returned sorted.
std::pair<std::vector<size_t>, std::vector<size_t>> SplitIndices(
    size_t n, double test_fraction, uint64_t seed) {
  VFS_ENFORCE_T(ConfigError, test_fraction >= 0 && test_fraction < 1,
                "data.test_fraction: must be in [0, 1), got ", test_fraction);
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  Rng rng = MakeRng(seed, Stream::kSplit);
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  const size_t n_test = static_cast<size_t>(std::llround(test_fraction * n));
  std::vector<size_t> test(idx.begin(), idx.begin() + n_test);
  std::vector<size_t> train(idx.begin() + n_test, idx.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

Table SelectRows(const Table& t, const std::vector<size_t>& rows) {
  Table out;
  out.features = t.features;
  out.n_classes = t.n_classes;
  out.x.resize(rows.size(), t.x.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    out.x.row(i) = t.x.row(rows[i]);
    out.labels.push_back(t.labels[rows[i]]);
    out.provenance.push_back(t.provenance[rows[i]]);
  }
  return out;
}

// Numeric columns of both tables standardized with `train` statistics.
void Standardize(Table& train, Table& test) {
  for (const auto& f : train.features) {
    if (f.kind != ColumnKind::kNumeric) continue;
    const size_t c = f.col_begin;
    double mean = 0, sd = 1;
    if (train.rows() > 0) {
      mean = train.x.col(c).mean();
      const double var = (train.x.col(c).array() - mean).square().mean();
      sd = var > 0 ? std::sqrt(var) : 1.0;
    }
    train.x.col(c) = (train.x.col(c).array() - mean) / sd;
    if (test.rows() > 0) test.x.col(c) = (test.x.col(c).array() - mean) / sd;
  }
}

double ParseCell(const std::string& cell, size_t line, const std::string& col) {
  double v = 0;
  auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  VFS_ENFORCE_T(ConfigError,
                ec == std::errc() && p == cell.data() + cell.size() &&
                    std::isfinite(v),
                "line ", line, ", column '", col, "': cannot parse '", cell,
                "' as a number");
  return v;
}

}  // namespace

SplitTable LoadCsvText(const std::string& text, const CsvSchema& schema,
                       double test_fraction, uint64_t seed) {
  std::istringstream in(text);
  std::string line;
  VFS_ENFORCE_T(ConfigError, static_cast<bool>(std::getline(in, line)),
                "csv: missing header row");
  const auto header = SplitCsvLine(line, schema.delimiter);
  std::map<std::string, size_t> pos;
  for (size_t i = 0; i < header.size(); ++i) pos[header[i]] = i;
  auto column_of = [&](const std::string& name) {
    auto it = pos.find(name);
    VFS_ENFORCE_T(ConfigError, it != pos.end(), "csv: missing column '", name,
                  "'");
    return it->second;
  };
  const size_t label_pos = column_of(schema.label);

  struct Src {
    std::string name;
    ColumnKind kind;
    size_t pos;
  };
  std::vector<Src> srcs;
  std::map<std::string, ColumnKind> kinds(schema.columns.begin(),
                                          schema.columns.end());
  for (const auto& [name, kind] : schema.columns) column_of(name);
  // Header order defines feature order.
  for (const auto& h : header) {
    auto it = kinds.find(h);
    if (it == kinds.end() || it->second == ColumnKind::kIgnore || h == schema.label)
      continue;
    srcs.push_back({h, it->second, pos[h]});
  }
  VFS_ENFORCE_T(ConfigError, !srcs.empty(), "csv: no feature columns");

  std::vector<std::vector<std::string>> rows;
  std::vector<uint64_t> provenance;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (Trim(line).empty()) continue;
    auto cells = SplitCsvLine(line, schema.delimiter);
    VFS_ENFORCE_T(ConfigError, cells.size() == header.size(), "line ", lineno,
                  ": expected ", header.size(), " cells, got ", cells.size());
    bool missing = IsMissing(cells[label_pos]);
    for (const auto& s : srcs) missing = missing || IsMissing(cells[s.pos]);
    if (missing) continue;
    for (const auto& s : srcs)
      if (s.kind == ColumnKind::kNumeric) ParseCell(cells[s.pos], lineno, s.name);
    rows.push_back(std::move(cells));
    provenance.push_back(lineno);
  }
  VFS_ENFORCE_T(ConfigError, rows.size() >= 2, "csv: fewer than two usable rows");

  auto [train_idx, test_idx] = SplitIndices(rows.size(), test_fraction, seed);

  // Categorical levels come from the train split only.
  std::vector<Feature> features;
  size_t width = 0;
  for (const auto& s : srcs) {
    Feature f;
    f.name = s.name;
    f.kind = s.kind;
    f.col_begin = width;
    if (s.kind == ColumnKind::kCategorical) {
      std::set<std::string> lv;
      for (size_t r : train_idx) lv.insert(rows[r][s.pos]);
      f.levels.assign(lv.begin(), lv.end());
      width += f.levels.size();
    } else {
      width += 1;
    }
    f.col_end = width;
    features.push_back(std::move(f));
  }

  // Labels: positive_label -> binary; otherwise sorted distinct values.
  std::vector<std::string> classes;
  if (schema.positive_label.empty()) {
    std::set<std::string> cs;
    for (const auto& r : rows) cs.insert(r[label_pos]);
    classes.assign(cs.begin(), cs.end());
    VFS_ENFORCE_T(ConfigError, classes.size() >= 2, "csv: label '",
                  schema.label, "' has a single class");
  }

  Table all;
  all.features = features;
  all.n_classes = schema.positive_label.empty() ? static_cast<int>(classes.size()) : 2;
  all.x = RealMatrix::Zero(rows.size(), width);
  all.provenance = provenance;
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& cells = rows[i];
    for (size_t k = 0; k < srcs.size(); ++k) {
      const Feature& f = features[k];
      const std::string& cell = cells[srcs[k].pos];
      if (f.kind == ColumnKind::kNumeric) {
        all.x(i, f.col_begin) = ParseCell(cell, provenance[i], f.name);
      } else {
        auto it = std::lower_bound(f.levels.begin(), f.levels.end(), cell);
        // Levels unseen in train encode as all zeros.
        if (it != f.levels.end() && *it == cell)
          all.x(i, f.col_begin + (it - f.levels.begin())) = 1.0;
      }
    }
    const std::string& lab = cells[label_pos];
    if (!schema.positive_label.empty()) {
      all.labels.push_back(lab == schema.positive_label ? 1 : 0);
    } else {
      all.labels.push_back(static_cast<int>(
          std::lower_bound(classes.begin(), classes.end(), lab) - classes.begin()));
    }
  }

  SplitTable out{SelectRows(all, train_idx), SelectRows(all, test_idx)};
  Standardize(out.train, out.test);
  return out;
}

SplitTable LoadCsv(const std::string& path, const CsvSchema& schema,
                   double test_fraction, uint64_t seed) {
  std::ifstream in(path);
  VFS_ENFORCE_T(ConfigError, in, "cannot read csv '", path, "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return LoadCsvText(ss.str(), schema, test_fraction, seed);
}

SplitTable TrainTestSplit(const Table& table, double test_fraction,
                          uint64_t seed) {
  auto [train_idx, test_idx] = SplitIndices(table.rows(), test_fraction, seed);
  SplitTable out{SelectRows(table, train_idx), SelectRows(table, test_idx)};
  Standardize(out.train, out.test);
  return out;
}

Table Synthesize(size_t n_rows, size_t n_features, double class_sep, Rng& rng) {
  VFS_ENFORCE_T(ConfigError, n_rows >= 2 && n_features >= 2,
                "synthesize: need at least 2 rows and 2 features, got ", n_rows,
                "x", n_features);
  VFS_ENFORCE_T(ConfigError, std::isfinite(class_sep) && class_sep >= 0,
                "synthesize: class_sep must be finite and non-negative");
  Table t;
  t.n_classes = 2;
  for (size_t j = 0; j < n_features; ++j) {
    Feature f;
    f.name = "f" + std::to_string(j);
    f.col_begin = j;
    f.col_end = j + 1;
    t.features.push_back(std::move(f));
  }
  t.x.resize(n_rows, n_features);
  auto gauss = [&] {
    const double u1 = 1.0 - Uniform01(rng);
    const double u2 = Uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  };
  for (size_t i = 0; i < n_rows; ++i) {
    const int y = Uniform01(rng) < 0.5 ? 0 : 1;
    const double shift = (y == 1 ? 0.5 : -0.5) * class_sep;
    for (size_t j = 0; j < n_features; ++j) t.x(i, j) = shift + gauss();
    t.labels.push_back(y);
    t.provenance.push_back(i);
  }
  return t;
}

namespace {
double Phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
}  // namespace

double SyntheticBayesAuc(double class_sep, size_t n_features) {
  return Phi(class_sep * std::sqrt(static_cast<double>(n_features) / 2.0));
}

double SyntheticBayesAccuracy(double class_sep, size_t n_features) {
  return Phi(class_sep * std::sqrt(static_cast<double>(n_features)) / 2.0);
}

void PartitionSpec::Validate(const Table& table) const {
  VFS_ENFORCE_T(ConfigError, !groups.empty(), "partition: no passive groups");
  std::set<std::string> seen;
  auto claim = [&](const std::string& name, const std::string& where) {
    bool known = false;
    for (const auto& f : table.features) known = known || f.name == name;
    VFS_ENFORCE_T(ConfigError, known, where, ": unknown feature '", name, "'");
    VFS_ENFORCE_T(ConfigError, seen.insert(name).second, where, ": feature '",
                  name, "' assigned twice");
  };
  for (const auto& n : active_features) claim(n, "partition.active");
  for (size_t g = 0; g < groups.size(); ++g) {
    const std::string where = "partition.group." + std::to_string(g + 1);
    VFS_ENFORCE_T(ConfigError, !groups[g].features.empty(), where,
                  ".features: empty group");
    VFS_ENFORCE_T(ConfigError, groups[g].clients >= 1, where,
                  ".clients: must be at least 1");
    for (const auto& n : groups[g].features) claim(n, where + ".features");
  }
  for (const auto& f : table.features)
    VFS_ENFORCE_T(ConfigError, seen.count(f.name), "partition: feature '",
                  f.name, "' not assigned to any party");
  VFS_ENFORCE_T(ConfigError, !active_features.empty(),
                "partition.active: active party needs at least one feature");
}

PartitionViews Partition(const Table& table, const PartitionSpec& spec, Rng& rng) {
  spec.Validate(table);
  PartitionViews v;
  v.active_cols = table.Columns(spec.active_features);
  for (const auto& g : spec.groups) {
    v.group_cols.push_back(table.Columns(g.features));
    std::vector<size_t> order(table.rows());
    std::iota(order.begin(), order.end(), size_t{0});
    if (spec.shard == ShardRule::kRandom)
      for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    std::vector<std::vector<size_t>> shards(g.clients);
    for (size_t i = 0; i < order.size(); ++i) shards[i % g.clients].push_back(order[i]);
    for (auto& s : shards) std::sort(s.begin(), s.end());
    v.shards.push_back(std::move(shards));
  }
  return v;
}

PartitionSpec RandomFeaturePartition(const Table& table, size_t n_parts, Rng& rng) {
  auto names = table.FeatureNames();
  VFS_ENFORCE_T(ConfigError, n_parts >= 2,
                "partition.random.parts: need at least 2 parts, got ", n_parts);
  VFS_ENFORCE_T(ConfigError, n_parts <= names.size(),
                "partition.random.parts: ", n_parts, " parts for ", names.size(),
                " features");
  for (size_t i = names.size(); i > 1; --i) std::swap(names[i - 1], names[rng() % i]);
  PartitionSpec spec;
  const size_t base = names.size() / n_parts;
  const size_t extra = names.size() % n_parts;
  size_t at = 0;
  for (size_t p = 0; p < n_parts; ++p) {
    const size_t len = base + (p < extra ? 1 : 0);
    std::vector<std::string> part(names.begin() + at, names.begin() + at + len);
    at += len;
    if (p == 0) spec.active_features = std::move(part);
    else spec.groups.push_back({std::move(part), 1});
  }
  return spec;
}

std::string PartitionManifest(const Table& table, const PartitionSpec& spec,
                              const PartitionViews& views) {
  std::ostringstream os;
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
  };
  os << "rows = " << table.rows() << "\n";
  os << "active.features = " << join(spec.active_features) << "\n";
  os << "active.width = " << views.active_cols.size() << "\n";
  for (size_t g = 0; g < spec.groups.size(); ++g) {
    const std::string p = "group." + std::to_string(g + 1);
    os << p << ".features = " << join(spec.groups[g].features) << "\n";
    os << p << ".width = " << views.group_cols[g].size() << "\n";
    for (size_t k = 0; k < views.shards[g].size(); ++k) {
      os << p << ".client." << (k + 1) << ".samples = ";
      const auto& s = views.shards[g][k];
      for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << table.provenance[s[i]];
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace vfedsec
