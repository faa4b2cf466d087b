#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mrda/data.hpp"
#include "test_util.hpp"

using namespace mrda;

namespace {

Dataset parse(const std::string& text, CsvOptions opt = {}) {
  std::istringstream in(text);
  return from_table(csv::parse(in), opt);
}

CsvOptions seg_opts(const std::string& seg = "seg") {
  CsvOptions o;
  o.segment_col = seg;
  return o;
}

Dataset segmented(const std::vector<int>& sizes) {
  Dataset d;
  Index n = 0;
  for (int s : sizes) n += s;
  d.features = Matrix::Zero(n, 1);
  d.labels = Vector::Zero(n);
  Index at = 0;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    d.segment_names.push_back("g" + std::to_string(s));
    for (int i = 0; i < sizes[s]; ++i) {
      d.features(at, 0) = static_cast<double>(at);
      d.segment.push_back(static_cast<int>(s));
      ++at;
    }
  }
  d.feature_names = {"x"};
  return d;
}

bool is_partition(const IndexList& a, const IndexList& b, Index n) {
  std::set<Index> all(a.begin(), a.end());
  if (all.size() != a.size()) return false;
  for (Index i : b) {
    if (!all.insert(i).second) return false;
  }
  return static_cast<Index>(all.size()) == n && *all.begin() == 0 && *all.rbegin() == n - 1;
}

}  // namespace

TEST(LoadCsv, MinimalFile) {
  const Dataset d = parse("x1,seg,y\n1.5,a,0.25\n2,b,1\n", seg_opts());
  EXPECT_EQ(d.rows(), 2);
  EXPECT_EQ(d.dims(), 1);
  EXPECT_DOUBLE_EQ(d.features(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(d.labels[0], 0.25);
  EXPECT_EQ(d.segment_names, (std::vector<std::string>{"a", "b"}));
}

TEST(LoadCsv, NanCellNamesRowAndColumn) {
  try {
    parse("x1,seg,y\n1,a,0\nNaN,a,1\n", seg_opts());
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("x1"), std::string::npos) << msg;
  }
}

TEST(LoadCsv, UnparseableCellNamesRowAndColumn) {
  try {
    parse("x1,x2,seg,y\n1,2,a,0\n3,oops,a,1\n", seg_opts());
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("'x2'"), std::string::npos);
  }
}

TEST(LoadCsv, CategoricalColumnsAreLexicographic) {
  const Dataset d = parse("c,seg,y\nb,s,0\na,s,1\nb,s,2\n", seg_opts());
  EXPECT_EQ(d.feature_names, (std::vector<std::string>{"c=a", "c=b"}));
  Matrix expected(3, 2);
  expected << 0, 1, 1, 0, 0, 1;
  EXPECT_EQ(d.features, expected);
}

TEST(LoadCsv, MissingColumnAndEmptyFile) {
  EXPECT_THROW(parse("x1,seg\n1,a\n", seg_opts()), ConfigError);
  EXPECT_THROW(parse("x1,y\n1,0\n", seg_opts()), ConfigError);
  std::istringstream empty("");
  EXPECT_THROW(csv::parse(empty), Error);
}

TEST(LoadCsv, QuotedFieldsAndCrlf) {
  const Dataset d = parse("x1,seg,y\r\n1,\"a,b\",0\r\n2,\"say \"\"hi\"\"\",1\r\n", seg_opts());
  EXPECT_EQ(d.segment_names, (std::vector<std::string>{"a,b", "say \"hi\""}));
}

TEST(LoadCsv, ReferenceSchemaAndUnseenLevels) {
  const Dataset train = parse("c,x,seg,y\na,1,s1,0\nb,2,s2,1\n", seg_opts());
  std::istringstream in("c,x,seg,y\nz,3,s2,0\nb,4,s3,1\n");
  const Dataset test = from_table(csv::parse(in), seg_opts(), &train);
  EXPECT_EQ(test.feature_names, train.feature_names);
  EXPECT_EQ(test.features.row(0).head(2).sum(), 0.0);
  EXPECT_EQ(test.features(1, 1), 1.0);
  EXPECT_EQ(test.segment[0], 1);
  EXPECT_EQ(test.segment[1], 2);
  EXPECT_EQ(test.warnings.size(), 2u);
}

TEST(LoadCsv, ClassLabelsMustBeIndices) {
  CsvOptions o = seg_opts();
  o.task = TaskKind::binary();
  EXPECT_THROW(parse("x,seg,y\n1,a,2\n", o), DataError);
  EXPECT_THROW(parse("x,seg,y\n1,a,0.5\n", o), DataError);
}

TEST(LoadCsv, WriteReadRoundTrip) {
  SyntheticConfig cfg;
  cfg.n_train = 50;
  cfg.n_test = 10;
  cfg.n_segments = 3;
  const Dataset d = simulate_local_covshift(cfg).train;
  std::stringstream buf;
  write_csv(buf, d);
  const Dataset back = from_table(csv::parse(buf), CsvOptions{});
  EXPECT_EQ(back.features, d.features);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.segment, d.segment);
  EXPECT_EQ(back.segment_names, d.segment_names);
}

TEST(OneHot, DecodingRecoversCategorySets) {
  CounterRng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::map<std::string, std::set<std::string>> truth;
    std::string header = "seg,y";
    std::vector<std::vector<std::string>> cols;
    const int ncol = 1 + static_cast<int>(rng.below(3));
    for (int c = 0; c < ncol; ++c) {
      const std::string name = "c" + std::to_string(c);
      header += "," + name;
      std::vector<std::string> cells;
      for (int r = 0; r < 8; ++r) {
        cells.push_back("v" + std::to_string(rng.below(5)));
        truth[name].insert(cells.back());
      }
      cols.push_back(cells);
    }
    std::string text = header + "\n";
    for (int r = 0; r < 8; ++r) {
      text += "s,0";
      for (const auto& col : cols) text += "," + col[static_cast<std::size_t>(r)];
      text += "\n";
    }
    const Dataset d = parse(text, seg_opts());
    EXPECT_EQ(decode_onehot_names(d.feature_names), truth);
  }
}

TEST(SplitBaseTune, ExactFraction) {
  const Dataset d = segmented({10});
  const SplitPlan p = split_base_tune(d, 0.8, 3);
  EXPECT_EQ(p.base_indices.size(), 8u);
  EXPECT_EQ(p.tune_indices.size(), 2u);
}

TEST(SplitBaseTune, Deterministic) {
  const Dataset d = segmented({10, 7, 13});
  const SplitPlan a = split_base_tune(d, 0.8, 42), b = split_base_tune(d, 0.8, 42);
  EXPECT_EQ(a.base_indices, b.base_indices);
  EXPECT_EQ(a.tune_indices, b.tune_indices);
}

TEST(SplitBaseTune, StratifiedPerSegment) {
  const Dataset d = segmented({10, 10});
  const SplitPlan p = split_base_tune(d, 0.8, 5);
  int first = 0, second = 0;
  for (Index i : p.base_indices) (d.segment[static_cast<std::size_t>(i)] == 0 ? first : second)++;
  EXPECT_EQ(first, 8);
  EXPECT_EQ(second, 8);
}

TEST(SplitBaseTune, SingletonSegmentIsNamed) {
  const Dataset d = segmented({5, 1});
  try {
    split_base_tune(d, 0.8, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("g1"), std::string::npos);
  }
}

TEST(SplitBaseTune, PartitionAndFractionProperty) {
  CounterRng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> sizes;
    const int ns = 1 + static_cast<int>(rng.below(6));
    for (int s = 0; s < ns; ++s) sizes.push_back(2 + static_cast<int>(rng.below(40)));
    const Dataset d = segmented(sizes);
    const double varsigma = 0.05 + 0.9 * rng.uniform();
    const SplitPlan p = split_base_tune(d, varsigma, trial);
    const Index n = d.rows();
    ASSERT_TRUE(is_partition(p.base_indices, p.tune_indices, n));
    // Rounding is exact overall; keeping one row on each side of a segment
    // can move at most one row per segment.
    EXPECT_LE(std::abs(static_cast<double>(p.base_indices.size()) / n - varsigma), (ns + 1.0) / n + 1e-12)
        << "trial " << trial;
    std::vector<int> base(sizes.size(), 0);
    for (Index i : p.base_indices) base[static_cast<std::size_t>(d.segment[static_cast<std::size_t>(i)])]++;
    for (std::size_t s = 0; s < sizes.size(); ++s) {
      const double frac = static_cast<double>(base[s]) / sizes[s];
      EXPECT_LE(std::abs(frac - varsigma), 2.0 / sizes[s] + 1e-12) << "trial " << trial << " segment " << s;
    }
  }
}

TEST(SplitBaseTune, GroupsNeverStraddle) {
  CounterRng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Dataset d = segmented({30, 24});
    std::vector<std::string> groups;
    for (Index i = 0; i < d.rows(); ++i) {
      groups.push_back(std::to_string(d.segment[static_cast<std::size_t>(i)]) + "-" + std::to_string(rng.below(8)));
    }
    d.group = groups;
    const SplitPlan p = split_base_tune(d, 0.7, trial);
    ASSERT_TRUE(is_partition(p.base_indices, p.tune_indices, d.rows()));
    std::set<std::string> base_groups;
    for (Index i : p.base_indices) base_groups.insert(groups[static_cast<std::size_t>(i)]);
    for (Index i : p.tune_indices) EXPECT_FALSE(base_groups.count(groups[static_cast<std::size_t>(i)]));
  }
}

TEST(KFold, TenRowsFiveFolds) {
  const Dataset d = segmented({10});
  const auto folds = kfold_plan(d, 5, 1);
  ASSERT_EQ(folds.size(), 5u);
  std::set<Index> seen;
  for (const auto& f : folds) {
    EXPECT_EQ(f.valid_indices.size(), 2u);
    EXPECT_TRUE(is_partition(f.train_indices, f.valid_indices, 10));
    seen.insert(f.valid_indices.begin(), f.valid_indices.end());
  }
  EXPECT_EQ(seen.size(), 10u);
}

TEST(KFold, EachFoldIsOneGroup) {
  Dataset d = segmented({10});
  d.group = std::vector<std::string>{"a", "a", "b", "b", "c", "c", "d", "d", "e", "e"};
  const auto folds = kfold_plan(d, 5, 3);
  for (const auto& f : folds) {
    ASSERT_EQ(f.valid_indices.size(), 2u);
    EXPECT_EQ((*d.group)[static_cast<std::size_t>(f.valid_indices[0])],
              (*d.group)[static_cast<std::size_t>(f.valid_indices[1])]);
  }
}

TEST(KFold, Preconditions) {
  EXPECT_THROW(kfold_plan(segmented({10}), 1, 0), ConfigError);
  EXPECT_THROW(kfold_plan(segmented({10, 3}), 5, 0), Error);
}

TEST(KFold, PartitionProperty) {
  CounterRng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(5));
    std::vector<int> sizes;
    for (int s = 0; s < 4; ++s) sizes.push_back(k + static_cast<int>(rng.below(20)));
    const Dataset d = segmented(sizes);
    const auto folds = kfold_plan(d, k, trial);
    std::vector<int> hits(static_cast<std::size_t>(d.rows()), 0);
    for (const auto& f : folds) {
      ASSERT_TRUE(is_partition(f.train_indices, f.valid_indices, d.rows()));
      for (Index i : f.valid_indices) hits[static_cast<std::size_t>(i)]++;
      std::vector<int> per(sizes.size(), 0);
      for (Index i : f.valid_indices) per[static_cast<std::size_t>(d.segment[static_cast<std::size_t>(i)])]++;
      for (std::size_t s = 0; s < sizes.size(); ++s) {
        EXPECT_LE(std::abs(per[s] - static_cast<double>(sizes[s]) / k), 1.0);
      }
    }
    for (int h : hits) EXPECT_EQ(h, 1);
  }
}

TEST(Simulate, InterceptsEvenlySpaced) {
  EXPECT_DOUBLE_EQ(synthetic_intercept(0, 20), -2.0);
  EXPECT_DOUBLE_EQ(synthetic_intercept(19, 20), 2.0);
  for (int s = 1; s < 20; ++s) {
    EXPECT_NEAR(synthetic_intercept(s, 20) - synthetic_intercept(s - 1, 20), 4.0 / 19.0, 1e-15);
  }
}

namespace {

double formula(int s, int ns, double gamma, const double* x) {
  const double a0 = synthetic_intercept(s, ns);
  const double a1[4] = {-a0, -a0, -a0, -a0};
  double dot = 0.0;
  for (int j = 0; j < 4; ++j) dot += a1[j] * x[j];
  return a0 + dot + gamma * x[1] * (1.0 + std::sin(3.0 * x[0]));
}

}  // namespace

TEST(Simulate, FormulaAtHandPoints) {
  const double origin[4] = {0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(formula(0, 20, 1.0, origin), -2.0);
  const double e2[4] = {0, 1, 0, 0};
  EXPECT_DOUBLE_EQ(formula(0, 20, 1.0, e2), 1.0);
}

TEST(Simulate, NoiselessLabelsMatchIndependentFormula) {
  SyntheticConfig cfg;
  cfg.noise_sd = 0.0;
  cfg.n_train = 2000;
  cfg.n_test = 500;
  cfg.seed = 17;
  cfg.gamma.resize(20);
  for (int s = 0; s < 20; ++s) cfg.gamma[static_cast<std::size_t>(s)] = 0.1 * s;
  const TrainTest tt = simulate_local_covshift(cfg);
  for (const Dataset* d : {&tt.train, &tt.test}) {
    double worst = 0.0;
    for (Index i = 0; i < d->rows(); ++i) {
      const int s = d->segment[static_cast<std::size_t>(i)];
      const double y = formula(s, 20, cfg.gamma_of(s), d->features.row(i).data());
      worst = std::max(worst, std::abs(y - d->labels[i]));
    }
    EXPECT_EQ(worst, 0.0);
  }
}

TEST(Simulate, MomentsAndAllocation) {
  SyntheticConfig cfg;
  cfg.n_train = 20000;
  cfg.n_test = 20000;
  const TrainTest tt = simulate_local_covshift(cfg);
  EXPECT_NEAR(tt.train.features.mean(), 0.0, 0.02);
  EXPECT_NEAR(tt.test.features.mean(), 1.0, 0.01);
  const double var = (tt.test.features.array() - tt.test.features.mean()).square().mean();
  EXPECT_NEAR(std::sqrt(var), 0.3, 0.01);
  for (const auto& rows : tt.train.rows_by_segment()) EXPECT_EQ(rows.size(), 1000u);
}

TEST(Simulate, DeterministicAndRejectsBadConfig) {
  SyntheticConfig cfg;
  cfg.n_train = 100;
  cfg.seed = 4;
  const TrainTest a = simulate_local_covshift(cfg), b = simulate_local_covshift(cfg);
  EXPECT_EQ(a.train.features, b.train.features);
  EXPECT_EQ(a.test.labels, b.test.labels);
  cfg.n_segments = 0;
  EXPECT_THROW(simulate_local_covshift(cfg), ConfigError);
  cfg.n_segments = 2;
  cfg.noise_sd = -1;
  EXPECT_THROW(simulate_local_covshift(cfg), ConfigError);
}

namespace {

Dataset classes_dataset(Index n, int k, std::uint64_t seed) {
  Dataset d;
  d.task = k == 2 ? TaskKind::binary() : TaskKind::multiclass(k);
  d.features.resize(n, 1);
  d.labels.resize(n);
  d.segment_names = {"only"};
  d.segment.assign(static_cast<std::size_t>(n), 0);
  d.feature_names = {"x"};
  CounterRng rng(seed);
  for (Index i = 0; i < n; ++i) {
    d.labels[i] = static_cast<double>(i % k);
    d.features(i, 0) = rng.normal();
  }
  return d;
}

}  // namespace

TEST(ConstructShift, DegenerateCovariateProbabilities) {
  const Dataset d = classes_dataset(500, 2, 1);
  const TrainTest tt = construct_shift(d, CovariateShiftSpec{0, 0.25, 1.0, 0.0}, 3);
  Index above = 0;
  for (Index i = 0; i < d.rows(); ++i) above += d.features(i, 0) > 0.25;
  EXPECT_EQ(tt.test.rows(), above);
  EXPECT_TRUE((tt.test.features.col(0).array() > 0.25).all());
  EXPECT_TRUE((tt.train.features.col(0).array() <= 0.25).all());
}

TEST(ConstructShift, BinaryPositiveSubsampling) {
  const Dataset d = classes_dataset(50000, 2, 2);
  const TrainTest tt = construct_shift(d, BinaryLabelShiftSpec{0.2, 0.5}, 5);
  EXPECT_EQ(tt.train.rows(), 40000);
  EXPECT_NEAR(tt.test.labels.mean(), 0.25 / 0.75, 0.02);
}

TEST(ConstructShift, MulticlassTargetRates) {
  const Dataset d = classes_dataset(50000, 4, 3);
  const std::vector<double> rates{0.4, 0.1, 0.1, 0.4};
  const TrainTest tt = construct_shift(d, MulticlassLabelShiftSpec{0.2, rates}, 6);
  ASSERT_EQ(tt.test.rows(), 10000);
  std::vector<double> freq(4, 0.0);
  for (Index i = 0; i < tt.test.rows(); ++i) freq[static_cast<std::size_t>(tt.test.labels[i])] += 1.0 / 10000;
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(freq[static_cast<std::size_t>(c)], rates[static_cast<std::size_t>(c)], 0.02);
}

TEST(ConstructShift, Preconditions) {
  const Dataset bin = classes_dataset(100, 2, 1);
  EXPECT_THROW(construct_shift(bin, MulticlassLabelShiftSpec{0.2, {0.5, 0.5}}, 0), ConfigError);
  const Dataset multi = classes_dataset(100, 3, 1);
  EXPECT_THROW(construct_shift(multi, BinaryLabelShiftSpec{}, 0), ConfigError);
  EXPECT_THROW(construct_shift(multi, MulticlassLabelShiftSpec{0.2, {0.5, 0.5, 0.1}}, 0), ConfigError);
  EXPECT_THROW(construct_shift(bin, CovariateShiftSpec{0, 0.0, 1.5, 0.0}, 0), ConfigError);
  Dataset missing = classes_dataset(100, 3, 1);
  for (Index i = 0; i < missing.rows(); ++i) {
    if (missing.labels[i] == 2.0) missing.labels[i] = 1.0;
  }
  EXPECT_THROW(construct_shift(missing, MulticlassLabelShiftSpec{0.2, {0.2, 0.3, 0.5}}, 0), DataError);
}

TEST(ConstructShift, Deterministic) {
  const Dataset d = classes_dataset(1000, 2, 4);
  const TrainTest a = construct_shift(d, BinaryLabelShiftSpec{}, 8), b = construct_shift(d, BinaryLabelShiftSpec{}, 8);
  EXPECT_EQ(a.test.features, b.test.features);
  EXPECT_EQ(a.train.labels, b.train.labels);
}
