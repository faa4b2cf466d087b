#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mrda/mr.hpp"
#include "mrda/serialize.hpp"
#include "test_util.hpp"

using namespace mrda;
using mrda::test::normal_matrix;

namespace {

MrConfig fast_config() {
  MrConfig cfg;
  cfg.base.n_estimators = 30;
  cfg.global.n_estimators = 30;
  cfg.refine.n_estimators = 10;
  cfg.clusters.kind = ClusterPolicy::Kind::fixed;
  cfg.clusters.m = 2;
  cfg.threads = 1;
  return cfg;
}

TrainTest small_simulation(std::uint64_t seed, int segments = 4, Index n = 800) {
  SyntheticConfig sc;
  sc.n_segments = segments;
  sc.n_train = n;
  sc.n_test = n;
  sc.seed = seed;
  return simulate_local_covshift(sc);
}

Dataset binary_dataset(std::uint64_t seed, Index n, int segments) {
  CounterRng rng(seed);
  Dataset d;
  d.task = TaskKind::binary();
  d.features = normal_matrix(rng, n, 2);
  d.labels.resize(n);
  for (Index i = 0; i < n; ++i) {
    const int s = static_cast<int>(i % segments);
    d.segment.push_back(s);
    const double score = d.features(i, 0) * (s % 2 == 0 ? 1.5 : -1.5) + 0.5 * d.features(i, 1);
    d.labels[i] = rng.uniform() < sigmoid(score) ? 1.0 : 0.0;
  }
  for (int s = 0; s < segments; ++s) d.segment_names.push_back("b" + std::to_string(s));
  d.feature_names = {"x0", "x1"};
  return d;
}

Stage1Model stage1_of(const std::vector<Matrix>& margins, const Vector& y, const LossKind& loss,
                      double lambda_max = 1e6) {
  Stage1Options opt;
  opt.lambda_max = lambda_max;
  return fit_stage1_margins(margins, y, loss, opt);
}

}  // namespace

TEST(MrConfig, ShiftAndWeightCompatibility) {
  MrConfig cfg;
  cfg.weight_method = WeightMethod::bbse;
  EXPECT_THROW(cfg.validate(TaskKind::regression()), ConfigError);
  EXPECT_THROW(cfg.validate(TaskKind::binary()), ConfigError);  // covariate shift with BBSE
  cfg.shift = ShiftType::label;
  EXPECT_NO_THROW(cfg.validate(TaskKind::binary()));
  cfg.weight_method = WeightMethod::kmm;
  EXPECT_THROW(cfg.validate(TaskKind::binary()), ConfigError);
  EXPECT_THROW(parse_shift("concept"), ConfigError);
}

TEST(Stage1, PerfectSingleModel) {
  CounterRng rng(1);
  const Matrix h = normal_matrix(rng, 100, 1);
  const Stage1Model s = stage1_of({h}, h.col(0), LossKind::squared());
  ASSERT_EQ(s.beta.size(), 1);
  EXPECT_NEAR(s.beta[0], 1.0, 1e-6);
}

TEST(Stage1, ExactMixtureInsideBall) {
  CounterRng rng(2);
  const Matrix h1 = normal_matrix(rng, 200, 1), h2 = normal_matrix(rng, 200, 1);
  const Vector y = 0.5 * h1.col(0) + 0.5 * h2.col(0);
  const Stage1Model s = stage1_of({h1, h2}, y, LossKind::squared());
  EXPECT_NEAR(s.beta[0], 0.5, 1e-6);
  EXPECT_NEAR(s.beta[1], 0.5, 1e-6);
  EXPECT_LE(s.beta.norm(), 1.0);
  EXPECT_DOUBLE_EQ(s.lambda, 1e-8);

  // Least-squares oracle without intercept.
  Matrix design(200, 2);
  design << h1, h2;
  const Vector ls = design.colPivHouseholderQr().solve(y);
  EXPECT_NEAR(s.beta[0], ls[0], 1e-6);
  EXPECT_NEAR(s.beta[1], ls[1], 1e-6);
}

TEST(Stage1, LargeUnconstrainedSolutionProjectedToSphere) {
  CounterRng rng(3);
  const Matrix h1 = normal_matrix(rng, 200, 1), h2 = normal_matrix(rng, 200, 1);
  const Vector y = 3.0 * h1.col(0);
  Stage1Options free;
  free.ball = false;
  EXPECT_NEAR(fit_stage1_margins({h1, h2}, y, LossKind::squared(), free).beta.norm(), 3.0, 1e-6);
  const Stage1Model s = stage1_of({h1, h2}, y, LossKind::squared());
  EXPECT_GE(s.beta.norm(), 0.999);
  EXPECT_LE(s.beta.norm(), 1.0001);
  EXPECT_FALSE(s.hit_lambda_max);
}

TEST(Stage1, LambdaMaxFlag) {
  CounterRng rng(4);
  const Matrix h = normal_matrix(rng, 200, 1);
  const Stage1Model s = stage1_of({h}, 3.0 * h.col(0), LossKind::squared(), 1e-4);
  EXPECT_TRUE(s.hit_lambda_max);
  EXPECT_GT(s.beta.norm(), 1.0);
}

TEST(Stage1, MulticlassSharesOneCoefficientPerModel) {
  CounterRng rng(5);
  const Matrix h1 = normal_matrix(rng, 150, 3), h2 = normal_matrix(rng, 150, 3);
  Vector y(150);
  for (Index i = 0; i < 150; ++i) {
    Index arg;
    (0.7 * h1.row(i) + 0.3 * h2.row(i)).maxCoeff(&arg);
    y[i] = static_cast<double>(arg);
  }
  const Stage1Model s = stage1_of({h1, h2}, y, LossKind::softmax(3));
  EXPECT_EQ(s.beta.size(), 2);
  EXPECT_EQ(s.intercept.size(), 3);
  EXPECT_LE(s.beta.norm(), 1.0 + 1e-4);
  const Matrix combined = stage1_margin(s, {h1, h2});
  Matrix expected = s.beta[0] * h1 + s.beta[1] * h2;
  expected.rowwise() += s.intercept.transpose();
  EXPECT_LE((combined - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Stage1, BallAndDominanceProperty) {
  CounterRng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto inst = mrda::test::random_stacking_instance(rng);
    const Stage1Model s = fit_stage1_margins(inst.margins, inst.y, inst.loss);
    EXPECT_LE(s.beta.norm(), 1.0 + 1e-4) << "trial " << trial;
    const double stacked = mean_loss(inst.loss, inst.y, stage1_margin(s, inst.margins));
    double best_single = 1e300;
    for (const auto& h : inst.margins) best_single = std::min(best_single, mean_loss(inst.loss, inst.y, h));
    EXPECT_LE(stacked, best_single + 1e-4) << "trial " << trial;
  }
}

TEST(Stage1, NoInterceptOption) {
  CounterRng rng(7);
  const Matrix h = normal_matrix(rng, 50, 1);
  Stage1Options opt;
  opt.intercept = false;
  const Stage1Model s = fit_stage1_margins({h}, h.col(0).array() + 5.0, LossKind::squared(), opt);
  EXPECT_EQ(s.intercept[0], 0.0);
}

TEST(Stage2, ZeroTreesReturnsStage1Margin) {
  const TrainTest data = small_simulation(8);
  const ClusterAssignment one{{{0, 1, 2, 3}}, 4};
  const BaseEnsemble ens = fit_base_ensemble(data.train, one, fast_config().base, 1);
  const Stage1Model s1 = fit_stage1(data.train.features, data.train.labels, ens);
  GbtConfig none = fast_config().refine;
  none.n_estimators = 0;
  const GbtModel s2 = fit_stage2(data.train.features, data.train.labels, s1, ens,
                                 WeightVector::uniform(data.train.rows()), none);
  const Matrix delta = stage1_margin(s1, ens.margins(data.train.features));
  EXPECT_EQ(predict_margin(s2, data.train.features, &delta), delta);
}

TEST(Stage2, RefinementNeverIncreasesTuneLoss) {
  const TrainTest data = small_simulation(9);
  const ClusterAssignment one{{{0, 1, 2, 3}}, 4};
  const BaseEnsemble ens = fit_base_ensemble(data.train, one, fast_config().base, 1);
  const Matrix x = data.test.features;
  const Vector y = data.test.labels;
  const Stage1Model s1 = fit_stage1(x, y, ens);
  const Matrix delta = stage1_margin(s1, ens.margins(x));
  const GbtModel s2 = fit_stage2(x, y, s1, ens, WeightVector::uniform(x.rows()), fast_config().refine);
  EXPECT_LE(mean_loss(ens.loss, y, predict_margin(s2, x, &delta)), mean_loss(ens.loss, y, delta) + 1e-9);
}

TEST(BaseEnsemble, SingleClusterHasTwoModels) {
  const TrainTest data = small_simulation(10);
  const ClusterAssignment one{{{0, 1, 2, 3}}, 4};
  const BaseEnsemble ens = fit_base_ensemble(data.train, one, fast_config().base, 1);
  EXPECT_EQ(ens.size(), 2u);
  EXPECT_EQ(ens.margins(data.test.features).size(), 2u);
}

TEST(BaseEnsemble, ClusterModelsSpecialize) {
  CounterRng rng(11);
  const Index n = 1600;
  Dataset d;
  d.features = normal_matrix(rng, n, 2);
  d.labels.resize(n);
  for (Index i = 0; i < n; ++i) {
    const int s = static_cast<int>(i % 4);
    d.segment.push_back(s);
    d.labels[i] = (s < 2 ? 2.0 * d.features(i, 0) : -2.0 * d.features(i, 1)) + 0.1 * rng.normal();
  }
  d.segment_names = {"a", "b", "c", "d"};
  d.feature_names = {"x0", "x1"};
  IndexList fit_rows, held_rows;
  for (Index i = 0; i < n; ++i) (i < 1200 ? fit_rows : held_rows).push_back(i);
  const Dataset fit = d.subset(fit_rows), held = d.subset(held_rows);
  const ClusterAssignment two{{{0, 1}, {2, 3}}, 4};
  const BaseEnsemble ens = fit_base_ensemble(fit, two, fast_config().base, 1);
  ASSERT_EQ(ens.size(), 3u);
  const auto margins = ens.margins(held.features);
  for (int c = 0; c < 2; ++c) {
    IndexList rows;
    for (Index i = 0; i < held.rows(); ++i) {
      if ((held.segment[static_cast<std::size_t>(i)] < 2) == (c == 0)) rows.push_back(i);
    }
    const Vector y = take(held.labels, rows);
    const double own = mean_loss(ens.loss, y, take_rows(margins[static_cast<std::size_t>(c)], rows));
    const double other = mean_loss(ens.loss, y, take_rows(margins[static_cast<std::size_t>(1 - c)], rows));
    EXPECT_LT(own, other) << "cluster " << c;
  }
}

TEST(ResolveClusters, Policies) {
  const TrainTest data = small_simulation(12);
  MrConfig cfg = fast_config();
  cfg.clusters.kind = ClusterPolicy::Kind::explicit_clusters;
  cfg.clusters.sets = {{"s1", "s2"}};
  SegmentDistanceMatrix dm;
  const ClusterAssignment a = resolve_clusters(data.train, cfg, &dm);
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.m(), 2);
  cfg.clusters.sets = {{"nope"}};
  EXPECT_THROW(resolve_clusters(data.train, cfg, &dm), ConfigError);
  cfg.clusters.kind = ClusterPolicy::Kind::fixed;
  cfg.clusters.m = 3;
  EXPECT_EQ(resolve_clusters(data.train, cfg, &dm).m(), 3);
  EXPECT_EQ(dm.size(), 4);
}

class FittedMr : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new TrainTest(small_simulation(13));
    model_ = new MrModel(fit_mr(data_->train, data_->test, fast_config()));
  }
  static void TearDownTestSuite() {
    delete model_;
    delete data_;
  }
  static TrainTest* data_;
  static MrModel* model_;
};

TrainTest* FittedMr::data_ = nullptr;
MrModel* FittedMr::model_ = nullptr;

TEST_F(FittedMr, EverySegmentHasAModelInsideTheBall) {
  for (int s = 0; s < data_->train.n_segments(); ++s) {
    const SegmentModel* sm = model_->segment_model(s);
    ASSERT_NE(sm, nullptr);
    EXPECT_LE(sm->stage1.beta.norm(), 1.0 + 1e-4);
    EXPECT_EQ(sm->stage1.beta.size(), static_cast<Index>(model_->ensemble.size()));
    EXPECT_NEAR(sm->weights.mean, 1.0, 1e-9);
  }
  EXPECT_GE(model_->ensemble.size(), 2u);
}

TEST_F(FittedMr, UnknownSegmentUsesFallback) {
  const Matrix x = data_->test.features.topRows(10);
  const std::vector<int> unknown(10, 99);
  const Matrix got = predict(*model_, x, unknown);
  const Matrix fallback = predict(model_->fallback, x, std::vector<int>(10, -1));
  EXPECT_EQ(got, fallback);
}

TEST_F(FittedMr, BeatsGlobalModelOnShiftedTest) {
  const Matrix mr = predict(*model_, data_->test.features, data_->test.segment);
  const GlobalModel global = fit_global_gbt(data_->train, fast_config());
  const Matrix xgb = predict(global, data_->test.features, data_->test.segment);
  const double mse_mr = (mr.col(0) - data_->test.labels).squaredNorm();
  const double mse_xgb = (xgb.col(0) - data_->test.labels).squaredNorm();
  EXPECT_LT(mse_mr, mse_xgb);
}

TEST_F(FittedMr, SerializationRoundTrip) {
  const std::string text = to_json(*model_).dump();
  const MrModel back = mr_from_json(Json::parse(text));
  EXPECT_EQ(to_json(back).dump(), text);
  EXPECT_EQ(predict(back, data_->test.features, data_->test.segment),
            predict(*model_, data_->test.features, data_->test.segment));
}

TEST(FitMr, Deterministic) {
  const TrainTest data = small_simulation(14, 3, 400);
  const MrConfig cfg = fast_config();
  EXPECT_EQ(to_json(fit_mr(data.train, data.test, cfg)).dump(), to_json(fit_mr(data.train, data.test, cfg)).dump());
}

TEST(FitMr, CollapseChain) {
  const TrainTest data = small_simulation(15, 3, 400);
  MrConfig cfg = fast_config();
  cfg.weight_method = WeightMethod::none;
  cfg.refine.n_estimators = 0;
  const MrModel model = fit_mr(data.train, data.test, cfg);
  const Matrix full = predict_margin(model, data.test.features, data.test.segment);
  EXPECT_EQ(full, predict_stage1_margin(model, data.test.features, data.test.segment));

  // Single base model with beta fixed at (1) and no intercept reduces to that model.
  MrModel single = model;
  single.ensemble.models.resize(1);
  for (auto& sm : single.segments) {
    sm->stage1.beta = Vector::Ones(1);
    sm->stage1.intercept = Vector::Zero(1);
  }
  EXPECT_EQ(predict_margin(single, data.test.features, data.test.segment),
            predict_margin(single.ensemble.models[0], data.test.features));
}

TEST(FitMr, SegmentMissingFromTestGetsUniformWeights) {
  TrainTest data = small_simulation(16, 3, 400);
  IndexList keep;
  for (Index i = 0; i < data.test.rows(); ++i) {
    if (data.test.segment[static_cast<std::size_t>(i)] != 1) keep.push_back(i);
  }
  const Dataset test = data.test.subset(keep);
  const MrModel model = fit_mr(data.train, test, fast_config());
  const SegmentModel* sm = model.segment_model(1);
  ASSERT_NE(sm, nullptr);
  EXPECT_EQ(sm->weights.min, 1.0);
  EXPECT_EQ(sm->weights.max, 1.0);
  bool warned = false;
  for (const auto& w : model.warnings) warned |= w.find(data.train.segment_names[1]) != std::string::npos;
  EXPECT_TRUE(warned);
}

TEST(FitMr, BinaryOutputsAreProbabilities) {
  const Dataset train = binary_dataset(17, 800, 4), test = binary_dataset(18, 400, 4);
  const MrModel model = fit_mr(train, test, fast_config());
  const Matrix p = predict(model, test.features, test.segment);
  EXPECT_EQ(p.cols(), 1);
  EXPECT_GE(p.minCoeff(), 0.0);
  EXPECT_LE(p.maxCoeff(), 1.0);
}

TEST(FitMr, LabelShiftWithBbse) {
  Dataset train = binary_dataset(19, 800, 2), test = binary_dataset(20, 400, 2);
  MrConfig cfg = fast_config();
  cfg.clusters.m = 1;
  cfg.shift = ShiftType::label;
  cfg.weight_method = WeightMethod::bbse;
  const MrModel model = fit_mr(train, test, cfg);
  for (int s = 0; s < 2; ++s) {
    ASSERT_NE(model.segment_model(s), nullptr);
    EXPECT_EQ(model.segment_model(s)->weights.method, WeightMethod::bbse);
  }
}

TEST(FitMr, SegmentRelabelingPreservesPredictions) {
  const TrainTest data = small_simulation(21, 4, 600);
  const std::vector<int> perm{2, 0, 3, 1};  // old id -> new id
  auto relabel = [&](Dataset d) {
    std::vector<std::string> names(d.segment_names.size());
    for (std::size_t s = 0; s < perm.size(); ++s) names[static_cast<std::size_t>(perm[s])] = d.segment_names[s];
    d.segment_names = names;
    for (auto& s : d.segment) s = perm[static_cast<std::size_t>(s)];
    return d;
  };
  const Dataset train2 = relabel(data.train), test2 = relabel(data.test);
  const MrConfig cfg = fast_config();
  const MrModel a = fit_mr(data.train, data.test, cfg);
  const MrModel b = fit_mr(train2, test2, cfg);
  const Matrix pa = predict(a, data.test.features, data.test.segment);
  const Matrix pb = predict(b, test2.features, test2.segment);
  EXPECT_LE((pa - pb).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(FitDr, CollapsesToGlobalModel) {
  const TrainTest data = small_simulation(22, 3, 400);
  MrConfig cfg = fast_config();
  cfg.weight_method = WeightMethod::none;
  cfg.refine.n_estimators = 0;
  const GlobalModel dr = fit_dr(data.train, data.test, cfg, false);
  const GlobalModel plain = fit_global_gbt(data.train, cfg);
  EXPECT_EQ(predict(dr, data.test.features, data.test.segment), predict(plain, data.test.features, data.test.segment));
}

TEST(FitDr, SegmentFeaturesWidenInput) {
  const TrainTest data = small_simulation(23, 3, 400);
  const GlobalModel sf = fit_dr(data.train, data.test, fast_config(), true);
  EXPECT_EQ(sf.input_width(), data.train.dims() + 3);
  EXPECT_EQ(sf.base.n_features, data.train.dims() + 3);
  const Matrix onehot = with_segment_onehot(data.test.features.topRows(3), {0, 2, -1}, 3);
  EXPECT_EQ(onehot.row(0).tail(3), (Vector(3) << 1, 0, 0).finished().transpose());
  EXPECT_EQ(onehot.row(1).tail(3), (Vector(3) << 0, 0, 1).finished().transpose());
  EXPECT_EQ(onehot.row(2).tail(3).sum(), 0.0);
}
