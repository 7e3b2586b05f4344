#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.h"
#include "vfedsec/datahub.h"
#include "vfedsec/kvfile.h"

namespace vfedsec {
namespace {

CsvSchema ToySchema() {
  return CsvSchema::Parse(
      "label = y\nlabel.positive = yes\n"
      "column.n = numeric\ncolumn.c = categorical\ncolumn.skip = ignore\n");
}

TEST(CsvSchema, ParsesKindsAndDelimiter) {
  const CsvSchema s = CsvSchema::Parse(
      "label = y\ndelimiter = ;\ncolumn.age = numeric\ncolumn.job = categorical\n");
  EXPECT_EQ(s.label, "y");
  EXPECT_EQ(s.delimiter, ';');
  EXPECT_TRUE(s.positive_label.empty());
  ASSERT_EQ(s.columns.size(), 2u);
  EXPECT_THROW(CsvSchema::Parse("label = y\ncolumn.a = text\n"), ConfigError);
  EXPECT_THROW(CsvSchema::Parse("label = y\n"), ConfigError);
}

TEST(LoadCsv, OneHotTwoLevels) {
  const SplitTable t = LoadCsvText("n,c,skip,y\n1,a,z,yes\n2,b,z,no\n3,a,z,yes\n",
                                   ToySchema(), 0.0, 1);
  EXPECT_EQ(t.train.rows(), 3u);
  EXPECT_EQ(t.test.rows(), 0u);
  ASSERT_EQ(t.train.features.size(), 2u);
  const Feature& c = t.train.feature("c");
  EXPECT_EQ(c.width(), 2u);
  EXPECT_EQ(c.levels, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(t.train.x.cols(), 3);
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(t.train.x(i, c.col_begin) + t.train.x(i, c.col_begin + 1), 1.0);
  }
  EXPECT_EQ(t.train.x(1, c.col_begin + 1), 1.0);
  EXPECT_EQ(t.train.labels, (std::vector<int>{1, 0, 1}));
}

TEST(LoadCsv, NumericStandardized) {
  const SplitTable t = LoadCsvText("n,c,skip,y\n1,a,z,yes\n2,b,z,no\n3,a,z,yes\n",
                                   ToySchema(), 0.0, 1);
  const auto col = t.train.x.col(t.train.feature("n").col_begin);
  EXPECT_NEAR(col.mean(), 0.0, 1e-15);
  EXPECT_NEAR((col.array() - col.mean()).square().mean(), 1.0, 1e-12);
  EXPECT_NEAR(col(2), std::sqrt(1.5), 1e-12);
}

TEST(LoadCsv, QuotedCellsAndMissingRowsDropped) {
  const SplitTable t = LoadCsvText(
      "n,c,skip,y\n1,\"a,x\",z,yes\n2,?,z,no\n,b,z,no\n4,b,z,no\n5,b,,yes\n",
      ToySchema(), 0.0, 1);
  EXPECT_EQ(t.train.rows(), 3u);
  EXPECT_EQ(t.train.feature("c").levels, (std::vector<std::string>{"a,x", "b"}));
  EXPECT_EQ(t.train.provenance, (std::vector<uint64_t>{2, 5, 6}));
}

TEST(LoadCsv, ErrorsNamePosition) {
  try {
    LoadCsvText("n,c,skip,y\n1,a,z,yes\nabc,b,z,no\n", ToySchema(), 0.0, 1);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("line 3"), std::string::npos) << m;
    EXPECT_NE(m.find("'n'"), std::string::npos) << m;
  }
  try {
    LoadCsvText("n,skip,y\n1,z,yes\n", ToySchema(), 0.0, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("missing column 'c'"), std::string::npos);
  }
  EXPECT_THROW(LoadCsvText("n,c,skip,y\n1,a,z\n", ToySchema(), 0.0, 1), ConfigError);
  EXPECT_THROW(LoadCsv("/nonexistent/file.csv", ToySchema(), 0.2, 1), ConfigError);
}

TEST(LoadCsv, MulticlassLabels) {
  const CsvSchema s = CsvSchema::Parse("label = y\ncolumn.n = numeric\n");
  const SplitTable t = LoadCsvText("n,y\n1,cat\n2,dog\n3,ant\n4,dog\n", s, 0.0, 1);
  EXPECT_EQ(t.train.n_classes, 3);
  EXPECT_EQ(t.train.labels, (std::vector<int>{1, 2, 0, 2}));
}

std::string RandomCsv(size_t rows, uint64_t seed) {
  Rng rng(seed);
  std::string s = "n,c,skip,y\n";
  const char* lv[] = {"red", "green", "blue"};
  for (size_t i = 0; i < rows; ++i)
    s += std::to_string(static_cast<int>(rng() % 1000)) + "," + lv[rng() % 3] +
         ",q," + (rng() % 2 ? "yes" : "no") + "\n";
  return s;
}

// Property: train-split preprocessing never reads test rows.
TEST(DatahubProperty, NoTestLeakage) {
  const std::string text = RandomCsv(200, 5);
  const SplitTable base = LoadCsvText(text, ToySchema(), 0.25, 9);
  ASSERT_EQ(base.test.rows(), 50u);
  std::set<uint64_t> test_lines(base.test.provenance.begin(), base.test.provenance.end());
  std::istringstream in(text);
  std::string line, edited;
  for (uint64_t n = 1; std::getline(in, line); ++n) {
    if (test_lines.count(n)) line = "999999,purple,q,yes";
    edited += line + "\n";
  }
  const SplitTable other = LoadCsvText(edited, ToySchema(), 0.25, 9);
  EXPECT_EQ(other.train.x, base.train.x);
  EXPECT_EQ(other.train.feature("c").levels, base.train.feature("c").levels);
  EXPECT_EQ(other.test.provenance, base.test.provenance);
  const Feature& c = other.test.feature("c");
  for (size_t i = 0; i < other.test.rows(); ++i)
    EXPECT_EQ(other.test.x.row(i).segment(c.col_begin, c.width()).sum(), 0.0);
}

TEST(DatahubProperty, SplitIsPartitionOfRows) {
  Rng rng(3);
  const Table t = Synthesize(101, 3, 1.0, rng);
  const SplitTable s = TrainTestSplit(t, 0.2, 77);
  EXPECT_EQ(s.test.rows(), 20u);
  std::set<uint64_t> all(s.train.provenance.begin(), s.train.provenance.end());
  all.insert(s.test.provenance.begin(), s.test.provenance.end());
  EXPECT_EQ(all.size(), 101u);
  EXPECT_TRUE(std::is_sorted(s.train.provenance.begin(), s.train.provenance.end()));
  for (size_t i = 0; i < s.train.rows(); ++i)
    EXPECT_EQ(s.train.labels[i], t.labels[s.train.provenance[i]]);
  EXPECT_THROW(TrainTestSplit(t, 1.0, 1), ConfigError);
}

TEST(Synthesize, DeterministicBytes) {
  Rng a(42), b(42), c(43);
  const Table ta = Synthesize(300, 5, 0.7, a), tb = Synthesize(300, 5, 0.7, b);
  const Table tc = Synthesize(300, 5, 0.7, c);
  EXPECT_EQ(ta.x, tb.x);
  EXPECT_EQ(ta.labels, tb.labels);
  EXPECT_NE(ta.x, tc.x);
  EXPECT_EQ(ta.FeatureNames().front(), "f0");
  EXPECT_THROW(Synthesize(1, 5, 0.7, a), ConfigError);
  EXPECT_THROW(Synthesize(10, 1, 0.7, a), ConfigError);
  EXPECT_THROW(Synthesize(10, 3, -1, a), ConfigError);
}

TEST(Synthesize, BayesRatesMatchMonteCarlo) {
  EXPECT_DOUBLE_EQ(SyntheticBayesAuc(0.0, 10), 0.5);
  EXPECT_DOUBLE_EQ(SyntheticBayesAccuracy(0.0, 10), 0.5);
  for (double sep : {0.1, 0.3}) {
    Rng rng(11);
    const size_t d = 8;
    const Table t = Synthesize(40000, d, sep, rng);
    std::vector<double> score(t.rows());
    size_t correct = 0;
    for (size_t i = 0; i < t.rows(); ++i) {
      score[i] = t.x.row(i).sum();
      correct += (score[i] > 0) == (t.labels[i] == 1);
    }
    EXPECT_NEAR(MetricAuc(score, t.labels), SyntheticBayesAuc(sep, d), 0.01) << sep;
    EXPECT_NEAR(static_cast<double>(correct) / t.rows(), SyntheticBayesAccuracy(sep, d), 0.01)
        << sep;
  }
}

TEST(Synthesize, LargeSeparationLinearModelAuc) {
  Rng rng(12);
  const SplitTable s = TrainTestSplit(Synthesize(2000, 20, 1.0, rng), 0.2, 5);
  Rng init(1);
  DenseStack lin = DenseStack::Init({20, 1}, true, init);
  for (int step = 0; step < 200; ++step) {
    DenseStack::Cache c;
    const RealMatrix logits = lin.Forward(s.train.x, &c);
    lin.SgdApply(lin.Backward(c, LossAndGrad(logits, s.train.labels, Task::kBinary).d_logits), 0.5);
  }
  const RealMatrix out = lin.Forward(s.test.x);
  std::vector<double> sc(out.data(), out.data() + out.size());
  EXPECT_GT(MetricAuc(sc, s.test.labels), 0.95);
}

PartitionSpec BankLikeSpec() {
  PartitionSpec p;
  p.active_features = {"f0", "f1", "f2"};
  p.groups = {{{"f3", "f4"}, 2}, {{"f5", "f6", "f7"}, 3}};
  return p;
}

TEST(Partition, ShardsDisjointCoveringAndAligned) {
  Rng rng(1);
  const Table t = Synthesize(103, 8, 0.5, rng);
  for (ShardRule rule : {ShardRule::kRoundRobin, ShardRule::kRandom}) {
    PartitionSpec spec = BankLikeSpec();
    spec.shard = rule;
    Rng prng(4);
    const PartitionViews v = Partition(t, spec, prng);
    EXPECT_EQ(v.active_cols, (std::vector<size_t>{0, 1, 2}));
    EXPECT_EQ(v.group_cols[1], (std::vector<size_t>{5, 6, 7}));
    for (size_t g = 0; g < 2; ++g) {
      std::vector<size_t> all;
      for (const auto& s : v.shards[g]) all.insert(all.end(), s.begin(), s.end());
      std::sort(all.begin(), all.end());
      ASSERT_EQ(all.size(), 103u);
      for (size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
      for (const auto& s : v.shards[g])
        for (size_t i : s) EXPECT_EQ(t.provenance[i], i);
    }
  }
}

TEST(Partition, SingleClientShardIsWholeView) {
  Rng rng(1);
  const Table t = Synthesize(30, 4, 0.5, rng);
  PartitionSpec spec{{"f0"}, {{{"f1", "f2", "f3"}, 1}}};
  Rng prng(2);
  const PartitionViews v = Partition(t, spec, prng);
  ASSERT_EQ(v.shards[0].size(), 1u);
  EXPECT_EQ(v.shards[0][0].size(), 30u);
}

TEST(Partition, ValidationErrors) {
  Rng rng(1);
  const Table t = Synthesize(30, 4, 0.5, rng);
  auto expect_error = [&](PartitionSpec p, const std::string& needle) {
    try {
      p.Validate(t);
      ADD_FAILURE() << "no error for " << needle;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error({{"f0"}, {{{"f1", "f2", "f3", "zz"}, 1}}}, "unknown feature 'zz'");
  expect_error({{"f0", "f1"}, {{{"f1", "f2", "f3"}, 1}}}, "f1");
  expect_error({{"f0"}, {{{"f1", "f2"}, 1}}}, "f3");
  expect_error({{"f0"}, {{{"f1", "f2", "f3"}, 1}, {{}, 1}}}, "partition.group.2");
  expect_error({{"f0"}, {{{"f1", "f2", "f3"}, 0}}}, "partition.group.1");
  expect_error({{}, {{{"f0", "f1", "f2", "f3"}, 1}}}, "partition.active");
}

TEST(RandomFeaturePartition, BalancedAndCovering) {
  Rng rng(1);
  const Table t = Synthesize(10, 11, 0.5, rng);
  for (size_t parts : {2, 4, 5, 8, 11}) {
    Rng prng(parts);
    const PartitionSpec p = RandomFeaturePartition(t, parts, prng);
    EXPECT_EQ(p.groups.size(), parts - 1);
    std::vector<size_t> sizes{p.active_features.size()};
    std::set<std::string> all(p.active_features.begin(), p.active_features.end());
    for (const auto& g : p.groups) {
      EXPECT_EQ(g.clients, 1u);
      sizes.push_back(g.features.size());
      all.insert(g.features.begin(), g.features.end());
    }
    EXPECT_EQ(all.size(), 11u);
    EXPECT_LE(*std::max_element(sizes.begin(), sizes.end()) -
                  *std::min_element(sizes.begin(), sizes.end()), 1u);
    EXPECT_NO_THROW(p.Validate(t));
  }
  Rng prng(1);
  EXPECT_THROW(RandomFeaturePartition(t, 12, prng), ConfigError);
}

TEST(PartitionManifest, DeterministicText) {
  Rng rng(1);
  const Table t = Synthesize(6, 8, 0.5, rng);
  Rng p1(3), p2(3);
  const PartitionSpec spec = BankLikeSpec();
  const std::string a = PartitionManifest(t, spec, Partition(t, spec, p1));
  EXPECT_EQ(a, PartitionManifest(t, spec, Partition(t, spec, p2)));
  EXPECT_NE(a.find("group.1.client.2.samples = 1,3,5"), std::string::npos) << a;
  EXPECT_NE(a.find("active.features = f0,f1,f2"), std::string::npos);
}

TEST(KeyValues, ParseTypedAndErrors) {
  const KeyValues kv = KeyValues::Parse(
      "# comment\na.b = 3\nc = x, y ,z\nflag = true\nf = 0.25\n\nlist =\n");
  EXPECT_EQ(kv.GetInt("a.b", 0), 3);
  EXPECT_EQ(kv.GetList("c"), (std::vector<std::string>{"x", "y", "z"}));
  EXPECT_TRUE(kv.GetBool("flag", false));
  EXPECT_EQ(kv.GetDouble("f", 0), 0.25);
  EXPECT_TRUE(kv.GetList("list").empty());
  EXPECT_EQ(kv.GetString("missing", "d"), "d");
  EXPECT_EQ(kv.KeysWithPrefix("a"), (std::vector<std::string>{"a.b"}));
  EXPECT_EQ(kv.Canonical(), "a.b=3\nc=x, y ,z\nf=0.25\nflag=true\nlist=\n");
  try {
    kv.GetInt("c", 0);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("c", 0), 0u);
  }
  EXPECT_THROW(kv.RequireString("nope"), ConfigError);
  EXPECT_THROW(KeyValues::Parse("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(KeyValues::Parse("just text\n"), ConfigError);
}

TEST(LoadCsv, FromFileWithSemicolons) {
  const auto dir = std::filesystem::temp_directory_path() / "vfedsec_datahub_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "d.csv");
    f << "\"age\";\"job\";\"y\"\n30;\"admin.\";\"no\"\n40;\"tech\";\"yes\"\n50;\"tech\";\"no\"\n";
    std::ofstream s(dir / "d.schema");
    s << "label = y\nlabel.positive = yes\ndelimiter = ;\ncolumn.age = numeric\n"
         "column.job = categorical\n";
  }
  const SplitTable t =
      LoadCsv((dir / "d.csv").string(), CsvSchema::Load((dir / "d.schema").string()), 0.0, 1);
  EXPECT_EQ(t.train.rows(), 3u);
  EXPECT_EQ(t.train.feature("job").levels, (std::vector<std::string>{"admin.", "tech"}));
  EXPECT_EQ(t.train.labels, (std::vector<int>{0, 1, 0}));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace vfedsec
