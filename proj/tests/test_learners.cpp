#include <gtest/gtest.h>

#include <cmath>

#include "mrda/gbt.hpp"
#include "mrda/linear.hpp"
#include "mrda/serialize.hpp"
#include "test_util.hpp"

using namespace mrda;
using mrda::test::normal_matrix;

namespace {

Matrix mat(Index rows, Index cols, std::initializer_list<double> values) {
  Matrix m(rows, cols);
  auto it = values.begin();
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = *it++;
  return m;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

struct Fixture {
  Matrix x;
  Vector y;
};

Fixture regression_fixture(std::uint64_t seed, Index n = 300) {
  CounterRng rng(seed);
  Fixture f{normal_matrix(rng, n, 3), Vector(n)};
  for (Index i = 0; i < n; ++i) f.y[i] = std::sin(2 * f.x(i, 0)) + f.x(i, 1) * f.x(i, 2) + 0.1 * rng.normal();
  return f;
}

Fixture class_fixture(std::uint64_t seed, int classes, Index n = 300) {
  CounterRng rng(seed);
  Fixture f{normal_matrix(rng, n, 2), Vector(n)};
  for (Index i = 0; i < n; ++i) {
    const double s = f.x(i, 0) + 0.5 * f.x(i, 1) + 0.5 * rng.normal();
    f.y[i] = classes == 2 ? (s > 0 ? 1 : 0) : std::clamp(std::floor(s + classes / 2.0), 0.0, classes - 1.0);
  }
  return f;
}

GbtConfig small_config(int trees = 10, int depth = 3) {
  GbtConfig cfg;
  cfg.n_estimators = trees;
  cfg.max_depth = depth;
  cfg.learning_rate = 0.3;
  return cfg;
}

}  // namespace

TEST(Gradients, MatchFiniteDifferences) {
  CounterRng rng(1);
  for (const auto& loss : {LossKind::squared(), LossKind::logistic(), LossKind::softmax(3), LossKind::softmax(5)}) {
    EXPECT_LE(mrda::test::gradient_check(loss, rng, 20), 1e-5) << loss.name();
  }
}

TEST(MarginToProba, Examples) {
  EXPECT_DOUBLE_EQ(margin_to_proba(mat(1, 1, {0.0}), LossKind::logistic())(0, 0), 0.5);
  EXPECT_NEAR(margin_to_proba(mat(1, 1, {std::log(3.0)}), LossKind::logistic())(0, 0), 0.75, 1e-15);
  const Matrix p = margin_to_proba(Matrix::Zero(1, 3), LossKind::softmax(3));
  for (Index j = 0; j < 3; ++j) EXPECT_NEAR(p(0, j), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(margin_to_proba(Matrix::Zero(1, 1), LossKind::squared()), ConfigError);
}

TEST(MarginToProba, RowsSumToOneUnderExtremeMargins) {
  const Matrix m = mat(2, 3, {800, -800, 0, -1000, -1001, -999});
  const Matrix p = margin_to_proba(m, LossKind::softmax(3));
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR(p.row(0).sum(), 1.0, 1e-12);
  EXPECT_NEAR(p.row(1).sum(), 1.0, 1e-12);
}

TEST(Linear, ExactLine) {
  const Matrix x = mat(4, 1, {0, 1, 2, 3});
  const LinearModel m = fit_linear(x, vec({0, 2, 4, 6}), LossKind::squared(), 0.0);
  EXPECT_NEAR(m.coefficients(0, 0), 2.0, 1e-10);
  EXPECT_NEAR(m.intercept[0], 0.0, 1e-10);
}

TEST(Linear, BalancedLogisticIsZero) {
  const Matrix x = mat(4, 1, {1, 1, -1, -1});
  const LinearModel m = fit_linear(x, vec({0, 1, 0, 1}), LossKind::logistic(), 0.0);
  EXPECT_NEAR(m.coefficients(0, 0), 0.0, 1e-10);
  EXPECT_NEAR(m.intercept[0], 0.0, 1e-10);
}

TEST(Linear, RidgeClosedForm) {
  const Matrix x = mat(3, 2, {1, 0, 0.5, 2, -1, 1});
  const Vector y = vec({1, 3, -2});
  const Vector w = vec({1, 2, 0.5});
  LinearFitOptions opt;
  opt.fit_intercept = false;
  const LinearModel m = fit_linear(x, y, LossKind::squared(), 1.0, &w, opt);
  const Matrix xtw = x.transpose() * w.asDiagonal();
  const Vector expected = (xtw * x + Matrix::Identity(2, 2)).inverse() * (xtw * y);
  EXPECT_LE((m.coefficients.col(0) - expected).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Linear, SingularAtZeroPenalty) {
  const Matrix x = mat(3, 2, {1, 1, 2, 2, 3, 3});
  try {
    fit_linear(x, vec({1, 2, 3}), LossKind::squared(), 0.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("l2"), std::string::npos);
  }
  EXPECT_NO_THROW(fit_linear(x, vec({1, 2, 3}), LossKind::squared(), 0.1));
}

TEST(Linear, PredictExample) {
  LinearModel m;
  m.coefficients = mat(2, 1, {1, 0});
  m.intercept = vec({1});
  EXPECT_DOUBLE_EQ(predict_margin(m, mat(1, 2, {2, 5}))(0, 0), 3.0);
  EXPECT_THROW(predict_margin(m, Matrix::Zero(1, 3)), ConfigError);
}

TEST(Linear, SoftmaxFitsSeparableClasses) {
  const Fixture f = class_fixture(2, 3, 600);
  const LinearModel m = fit_linear(f.x, f.y, LossKind::softmax(3), 1e-2);
  const Matrix p = margin_to_proba(predict_margin(m, f.x), m.loss);
  int correct = 0;
  for (Index i = 0; i < f.x.rows(); ++i) {
    Index arg;
    p.row(i).maxCoeff(&arg);
    correct += arg == static_cast<Index>(f.y[i]);
  }
  EXPECT_GT(correct, 450);
}

TEST(Gbt, ZeroTreesKeepsBaseMargin) {
  const Fixture f = regression_fixture(3);
  CounterRng rng(4);
  const Matrix base = normal_matrix(rng, f.x.rows(), 1);
  const GbtModel with_base = fit_gbt(f.x, f.y, LossKind::squared(), small_config(0), nullptr, &base);
  EXPECT_EQ(predict_margin(with_base, f.x, &base), base);

  const GbtModel plain = fit_gbt(f.x, f.y, LossKind::squared(), small_config(0));
  const Matrix p = predict_margin(plain, f.x);
  EXPECT_TRUE((p.array() == f.y.mean()).all() || (p.array() - f.y.mean()).abs().maxCoeff() < 1e-12);
}

TEST(Gbt, SingleStumpHitsTargets) {
  GbtConfig cfg = small_config(1, 1);
  cfg.learning_rate = 1.0;
  cfg.leaf_l2 = 0.0;
  const Matrix x = mat(2, 1, {0, 1});
  const Vector y = vec({1, 3});
  const GbtModel m = fit_gbt(x, y, LossKind::squared(), cfg);
  const Matrix p = predict_margin(m, x);
  EXPECT_NEAR(p(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(p(1, 0), 3.0, 1e-12);
}

TEST(Gbt, DoublingWeightsLeavesTreesUnchanged) {
  const Fixture f = regression_fixture(5);
  GbtConfig cfg = small_config(8, 3);
  cfg.leaf_l2 = 0.0;
  cfg.min_child_weight = 0.0;
  CounterRng rng(6);
  Vector w(f.x.rows());
  for (Index i = 0; i < w.size(); ++i) w[i] = 0.5 + rng.uniform();
  const Vector w2 = 2.0 * w;
  const GbtModel a = fit_gbt(f.x, f.y, LossKind::squared(), cfg, &w);
  const GbtModel b = fit_gbt(f.x, f.y, LossKind::squared(), cfg, &w2);
  ASSERT_EQ(a.rounds.size(), b.rounds.size());
  for (std::size_t r = 0; r < a.rounds.size(); ++r) {
    const auto& ta = a.rounds[r][0].nodes;
    const auto& tb = b.rounds[r][0].nodes;
    ASSERT_EQ(ta.size(), tb.size());
    for (std::size_t k = 0; k < ta.size(); ++k) {
      EXPECT_EQ(ta[k].feature, tb[k].feature);
      EXPECT_EQ(ta[k].threshold, tb[k].threshold);
      EXPECT_NEAR(ta[k].leaf_value, tb[k].leaf_value, 1e-12);
    }
  }
}

TEST(Gbt, TwoStumpsSumAlongManualWalk) {
  const Fixture f = regression_fixture(7, 100);
  const GbtModel m = fit_gbt(f.x, f.y, LossKind::squared(), small_config(2, 1));
  ASSERT_EQ(m.rounds.size(), 2u);
  for (Index i = 0; i < 5; ++i) {
    double expected = m.initial_margin[0];
    for (const auto& round : m.rounds) {
      const auto& nodes = round[0].nodes;
      ASSERT_GE(nodes[0].feature, 0);
      const auto& root = nodes[0];
      const int leaf = f.x(i, root.feature) <= root.threshold ? root.left : root.right;
      expected += nodes[static_cast<std::size_t>(leaf)].leaf_value;
    }
    EXPECT_NEAR(predict_margin(m, f.x.row(i))(0, 0), expected, 1e-12);
  }
}

TEST(Gbt, DepthBoundAndFiniteLeaves) {
  for (int depth : {0, 1, 2, 4}) {
    const Fixture f = regression_fixture(8);
    const GbtModel m = fit_gbt(f.x, f.y, LossKind::squared(), small_config(5, depth));
    for (const auto& round : m.rounds) {
      EXPECT_LE(round[0].depth(), depth);
      for (const auto& node : round[0].nodes) EXPECT_TRUE(std::isfinite(node.leaf_value));
    }
  }
}

TEST(Gbt, TrainingLossNonIncreasing) {
  struct Case {
    LossKind loss;
    Fixture f;
  };
  const std::vector<Case> cases{{LossKind::squared(), regression_fixture(9)},
                                {LossKind::logistic(), class_fixture(10, 2)},
                                {LossKind::softmax(3), class_fixture(11, 3)}};
  for (const auto& c : cases) {
    CounterRng rng(12);
    Vector w(c.f.x.rows());
    for (Index i = 0; i < w.size(); ++i) w[i] = 0.2 + rng.uniform();
    GbtTrace trace;
    fit_gbt(c.f.x, c.f.y, c.loss, small_config(30, 3), &w, nullptr, &trace);
    ASSERT_EQ(trace.train_loss.size(), 31u);
    for (std::size_t r = 1; r < trace.train_loss.size(); ++r) {
      EXPECT_LE(trace.train_loss[r], trace.train_loss[r - 1] + 1e-12) << c.loss.name() << " round " << r;
    }
  }
}

TEST(Gbt, SerializedModelIsDeterministic) {
  const Fixture f = class_fixture(13, 3);
  GbtConfig cfg = small_config(10, 3);
  cfg.subsample = 0.7;
  cfg.colsample_bytree = 0.5;
  cfg.seed = 42;
  const auto a = to_json(fit_gbt(f.x, f.y, LossKind::softmax(3), cfg)).dump();
  const auto b = to_json(fit_gbt(f.x, f.y, LossKind::softmax(3), cfg)).dump();
  EXPECT_EQ(a, b);
  const GbtModel back = gbt_from_json(Json::parse(a));
  EXPECT_EQ(to_json(back).dump(), a);
}

TEST(Gbt, RowOrderDoesNotMatter) {
  const Fixture f = regression_fixture(14);
  std::vector<Index> perm(static_cast<std::size_t>(f.x.rows()));
  std::iota(perm.begin(), perm.end(), Index{0});
  CounterRng rng(15);
  rng.shuffle(perm);
  GbtConfig cfg = small_config(10, 3);
  cfg.subsample = 0.8;
  const GbtModel a = fit_gbt(f.x, f.y, LossKind::squared(), cfg);
  const GbtModel b = fit_gbt(take_rows(f.x, perm), take(f.y, perm), LossKind::squared(), cfg);
  EXPECT_EQ(predict_margin(a, f.x), predict_margin(b, f.x));
}

TEST(Gbt, ResidualPathMatchesBaseMarginPath) {
  const Fixture f = regression_fixture(16);
  CounterRng rng(17);
  Matrix base(f.x.rows(), 1);
  for (Index i = 0; i < base.rows(); ++i) base(i, 0) = 0.5 * f.x(i, 0) + 0.1 * rng.normal();
  const GbtConfig cfg = small_config(20, 3);
  const GbtModel with_base = fit_gbt(f.x, f.y, LossKind::squared(), cfg, nullptr, &base);
  const Matrix zero = Matrix::Zero(f.x.rows(), 1);
  const Vector residual = f.y - base.col(0);
  const GbtModel on_residual = fit_gbt(f.x, residual, LossKind::squared(), cfg, nullptr, &zero);
  const Matrix a = predict_margin(with_base, f.x, &base);
  const Matrix b = predict_margin(on_residual, f.x, &zero) + base;
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Gbt, Rejections) {
  const Fixture f = regression_fixture(18, 20);
  GbtConfig bad = small_config();
  bad.subsample = 0.0;
  EXPECT_THROW(fit_gbt(f.x, f.y, LossKind::squared(), bad), ConfigError);
  const Matrix wrong = Matrix::Zero(f.x.rows(), 2);
  EXPECT_THROW(fit_gbt(f.x, f.y, LossKind::squared(), small_config(), nullptr, &wrong), ConfigError);
  const GbtModel m = fit_gbt(f.x, f.y, LossKind::squared(), small_config(2));
  EXPECT_THROW(predict_margin(m, Matrix::Zero(2, 4)), ConfigError);
  Vector y = f.y;
  y[0] = INFINITY;
  EXPECT_THROW(fit_gbt(f.x, y, LossKind::squared(), small_config(2)), NumericError);
}

TEST(Gbt, ConstantFeatureNeverSplit) {
  CounterRng rng(19);
  Matrix x(100, 2);
  x.col(0).setConstant(3.0);
  x.col(1) = normal_matrix(rng, 100, 1).col(0);
  const Vector y = x.col(1).array().square().matrix();
  const GbtModel m = fit_gbt(x, y, LossKind::squared(), small_config(5, 3));
  for (const auto& round : m.rounds)
    for (const auto& node : round[0].nodes) EXPECT_NE(node.feature, 0);
}
