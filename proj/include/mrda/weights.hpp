#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mrda/linear.hpp"
#include "mrda/segmentation.hpp"
#include "mrda/types.hpp"

namespace mrda {

enum class WeightMethod { none, discriminative, kmm, bbse };

inline std::string to_string(WeightMethod m) {
  switch (m) {
    case WeightMethod::none: return "none";
    case WeightMethod::discriminative: return "discriminative";
    case WeightMethod::kmm: return "kmm";
    case WeightMethod::bbse: return "bbse";
  }
  return "unknown";
}

inline WeightMethod parse_weight_method(const std::string& name) {
  if (name == "none") return WeightMethod::none;
  if (name == "discriminative") return WeightMethod::discriminative;
  if (name == "kmm") return WeightMethod::kmm;
  if (name == "bbse") return WeightMethod::bbse;
  throw ConfigError("unknown weight method '" + name + "' (expected none, discriminative, kmm or bbse)");
}

inline constexpr double kDefaultEta = 10.0;

// Per-row importance weights for one segment, clipped to [0, eta] and then
// rescaled to mean one. normalization_factor is the divisor applied after
// clipping, so values * normalization_factor recovers the clipped weights.
struct WeightVector {
  Vector values;
  WeightMethod method = WeightMethod::none;
  double eta = kDefaultEta;
  double normalization_factor = 1.0;

  static WeightVector uniform(Index n) {
    WeightVector w;
    w.values = Vector::Ones(n);
    return w;
  }
};

// Class-frequency ratios Q(y) / P(y), one per class.
struct ClassWeightVector {
  Vector values;
};

inline WeightVector clip_and_normalize(Vector raw, double eta, WeightMethod method) {
  if (!(eta > 0.0)) throw ConfigError("eta must be positive");
  if (!raw.allFinite()) throw NumericError("importance weights are not finite");
  WeightVector w;
  w.method = method;
  w.eta = eta;
  w.values = raw.cwiseMax(0.0).cwiseMin(eta);
  const double mean = w.values.size() > 0 ? w.values.mean() : 1.0;
  if (!(mean > 0.0)) throw NumericError("every importance weight is zero");
  w.normalization_factor = mean;
  w.values /= mean;
  return w;
}

// ---------------------------------------------------------------------------
// Discriminative (probabilistic classifier) density ratio

// Logistic model separating train (T = 0) from test (T = 1) rows.
struct DensityRatioClassifier {
  LinearModel model;
  double clamp = 1e-3;

  // p / (1 - p) with p clamped to [clamp, 1 - clamp]; not clipped or normalized.
  Vector odds(const Matrix& x) const {
    const Matrix m = predict_margin(model, x);
    Vector out(x.rows());
    for (Index i = 0; i < x.rows(); ++i) {
      const double p = std::clamp(sigmoid(m(i, 0)), clamp, 1.0 - clamp);
      out[i] = p / (1.0 - p);
    }
    return out;
  }
};

inline DensityRatioClassifier fit_density_ratio_classifier(const Matrix& train_x, const Matrix& test_x) {
  if (train_x.rows() == 0 || test_x.rows() == 0) throw ConfigError("density ratio needs train and test rows");
  if (train_x.cols() != test_x.cols()) {
    throw ConfigError("train has " + std::to_string(train_x.cols()) + " features but test has " +
                      std::to_string(test_x.cols()));
  }
  Matrix stacked(train_x.rows() + test_x.rows(), train_x.cols());
  stacked.topRows(train_x.rows()) = train_x;
  stacked.bottomRows(test_x.rows()) = test_x;
  Vector target = Vector::Zero(stacked.rows());
  target.tail(test_x.rows()).setOnes();
  DensityRatioClassifier out;
  out.model = fit_linear(stacked, target, LossKind::logistic(), 1.0 / static_cast<double>(train_x.rows()));
  return out;
}

inline WeightVector fit_discriminative_weights(const Matrix& train_x, const Matrix& test_x, double eta = kDefaultEta) {
  const auto classifier = fit_density_ratio_classifier(train_x, test_x);
  return clip_and_normalize(classifier.odds(train_x), eta, WeightMethod::discriminative);
}

// ---------------------------------------------------------------------------
// Kernel mean matching

struct KmmResult {
  Vector weights;  // raw solution, before normalization
  std::vector<double> objective;  // per iteration, starting at w = 1 projected
  int iterations = 0;
};

inline double kmm_objective(const Matrix& gram, const Vector& kappa, const Vector& w) {
  const double n = static_cast<double>(w.size());
  return (w.dot(gram * w) - 2.0 * kappa.dot(w)) / (n * n);
}

// Euclidean projection onto {0 <= w <= eta, lo <= sum(w) <= hi}: clamp(w - tau)
// with the shift tau found by bisection when the sum bound is active.
inline Vector project_box_sum(const Vector& w, double eta, double lo, double hi) {
  auto shifted = [&](double tau) { return (w.array() - tau).max(0.0).min(eta).matrix().eval(); };
  Vector p = shifted(0.0);
  const double s = p.sum();
  if (s >= lo && s <= hi) return p;
  const double target = s < lo ? lo : hi;
  double a = w.minCoeff() - eta, b = w.maxCoeff();  // sum(shifted(a)) = n*eta, sum(shifted(b)) = 0
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (a + b);
    if (shifted(mid).sum() > target) {
      a = mid;
    } else {
      b = mid;
    }
  }
  return shifted(0.5 * (a + b));
}

// Projected gradient on min (1/n^2) w'Gw - (2/n^2) kappa'w subject to
// w in [0, eta] and |sum(w) - n| <= n * epsilon. Step 1/L with L from 50
// power iterations on G; halves the step if an iterate fails to descend.
inline KmmResult solve_kmm_qp(const Matrix& gram, const Vector& kappa, double eta, double epsilon,
                              int max_iter = 500, double tol = 1e-10) {
  const Index n = gram.rows();
  if (n < 1 || gram.cols() != n || kappa.size() != n) throw ConfigError("KMM gram/kappa shapes disagree");
  if (!gram.allFinite() || !kappa.allFinite()) throw NumericError("non-finite entries in KMM gram matrix");
  const double nd = static_cast<double>(n);
  const double lo = nd * (1.0 - epsilon), hi = nd * (1.0 + epsilon);

  Vector v = Vector::Ones(n) / std::sqrt(nd);
  double lambda_max = 0.0;
  for (int it = 0; it < 50; ++it) {
    const Vector gv = gram * v;
    lambda_max = v.dot(gv);
    const double norm = gv.norm();
    if (norm == 0.0) break;
    v = gv / norm;
  }
  // Power iteration underestimates from below; pad slightly.
  const double lipschitz = std::max(2.0 * lambda_max * 1.01 / (nd * nd), 1e-300);
  double step = 1.0 / lipschitz;

  KmmResult out;
  out.weights = project_box_sum(Vector::Ones(n), eta, lo, hi);
  double current = kmm_objective(gram, kappa, out.weights);
  out.objective.push_back(current);
  for (int it = 0; it < max_iter; ++it) {
    const Vector grad = 2.0 / (nd * nd) * (gram * out.weights - kappa);
    Vector next;
    double value = current;
    bool improved = false;
    for (int halving = 0; halving < 30; ++halving) {
      next = project_box_sum(out.weights - step * grad, eta, lo, hi);
      value = kmm_objective(gram, kappa, next);
      if (value <= current) {
        improved = true;
        break;
      }
      step *= 0.5;
    }
    out.iterations = it + 1;
    if (!improved) break;
    const double decrease = current - value;
    out.weights = std::move(next);
    current = value;
    out.objective.push_back(current);
    if (decrease < tol) break;
  }
  return out;
}

// Gram matrix of a Gaussian kernel between rows of a and b.
inline Matrix gaussian_gram(const Matrix& a, const Matrix& b, double bandwidth) {
  const Vector an = a.rowwise().squaredNorm();
  const Vector bn = b.rowwise().squaredNorm();
  Matrix sq = -2.0 * a * b.transpose();
  sq.colwise() += an;
  sq.rowwise() += bn.transpose();
  return (-sq.array().max(0.0) / (2.0 * bandwidth * bandwidth)).exp().matrix();
}

struct KmmOptions {
  std::optional<double> bandwidth;  // median heuristic on the training rows when unset
  std::optional<double> epsilon;    // eta / sqrt(n_tr) when unset
  std::uint64_t seed = 0;
};

inline WeightVector fit_kmm(const Matrix& train_x, const Matrix& test_x, double eta = kDefaultEta,
                            const KmmOptions& opt = {}) {
  if (train_x.rows() < 2) throw ConfigError("KMM needs at least 2 training rows");
  if (test_x.rows() < 1) throw ConfigError("KMM needs test rows");
  if (train_x.cols() != test_x.cols()) throw ConfigError("KMM train/test feature widths differ");
  const double ntr = static_cast<double>(train_x.rows()), nte = static_cast<double>(test_x.rows());
  const double bw = opt.bandwidth.value_or(median_bandwidth(train_x, opt.seed));
  const double epsilon = opt.epsilon.value_or(eta / std::sqrt(ntr));
  const Matrix gram = gaussian_gram(train_x, train_x, bw);
  const Vector kappa = (ntr / nte) * gaussian_gram(train_x, test_x, bw).rowwise().sum();
  const KmmResult res = solve_kmm_qp(gram, kappa, eta, epsilon);
  return clip_and_normalize(res.weights, eta, WeightMethod::kmm);
}

// ---------------------------------------------------------------------------
// Black box shift estimation

// Solves (C + ridge * tr(C) * I) w = mu and clamps negatives to zero.
inline ClassWeightVector solve_bbse(const Matrix& confusion, const Vector& mu, double ridge = 1e-8) {
  const Index k = confusion.rows();
  if (confusion.cols() != k || mu.size() != k) throw ConfigError("BBSE confusion/mu shapes disagree");
  const Matrix system = confusion + ridge * confusion.trace() * Matrix::Identity(k, k);
  Eigen::FullPivLU<Matrix> lu(system);
  if (!lu.isInvertible()) throw NumericError("BBSE confusion matrix is singular");
  ClassWeightVector out;
  out.values = lu.solve(mu).cwiseMax(0.0);
  if (!out.values.allFinite()) throw NumericError("BBSE produced non-finite class weights");
  return out;
}

// C_ij = P(yhat = i, y = j) from held-out source rows; mu_j = Q(yhat = j)
// from test predictions.
inline ClassWeightVector fit_bbse(const std::vector<int>& source_labels, const std::vector<int>& source_predicted,
                                  const std::vector<int>& test_predicted, int classes, double ridge = 1e-8) {
  if (source_labels.size() != source_predicted.size()) throw ConfigError("BBSE source labels/predictions misaligned");
  if (source_labels.empty() || test_predicted.empty()) throw ConfigError("BBSE needs source and test predictions");
  Matrix confusion = Matrix::Zero(classes, classes);
  std::vector<int> seen(static_cast<std::size_t>(classes), 0);
  for (std::size_t i = 0; i < source_labels.size(); ++i) {
    const int y = source_labels[i], yhat = source_predicted[i];
    if (y < 0 || y >= classes || yhat < 0 || yhat >= classes) throw ConfigError("BBSE class index out of range");
    confusion(yhat, y) += 1.0;
    seen[static_cast<std::size_t>(y)] = 1;
  }
  for (int c = 0; c < classes; ++c) {
    if (!seen[static_cast<std::size_t>(c)]) throw DataError("class " + std::to_string(c) + " is missing from the BBSE source labels");
  }
  confusion /= static_cast<double>(source_labels.size());
  Vector mu = Vector::Zero(classes);
  for (int yhat : test_predicted) {
    if (yhat < 0 || yhat >= classes) throw ConfigError("BBSE class index out of range");
    mu[yhat] += 1.0;
  }
  mu /= static_cast<double>(test_predicted.size());
  return solve_bbse(confusion, mu, ridge);
}

// w_i = cw[y_i], clipped to [0, eta], normalized to mean one.
inline WeightVector expand_class_weights(const ClassWeightVector& cw, const Vector& labels, double eta = kDefaultEta) {
  Vector raw(labels.size());
  for (Index i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<Index>(labels[i]);
    if (c < 0 || c >= cw.values.size()) throw ConfigError("label outside the class weight vector");
    raw[i] = cw.values[c];
  }
  return clip_and_normalize(std::move(raw), eta, WeightMethod::bbse);
}

}  // namespace mrda
