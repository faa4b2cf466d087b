#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "mrda/types.hpp"

namespace mrda {

enum class LossType { squared, logistic, softmax };

// Training loss in margin space. Squared loss is 0.5 * (m - y)^2 so the
// hessian is exactly one.
class LossKind {
 public:
  static LossKind squared() { return LossKind(LossType::squared, 1); }
  static LossKind logistic() { return LossKind(LossType::logistic, 2); }
  static LossKind softmax(int classes) {
    if (classes < 2) throw ConfigError("softmax loss needs at least 2 classes");
    return LossKind(LossType::softmax, classes);
  }
  static LossKind for_task(const TaskKind& task) {
    switch (task.type()) {
      case TaskType::regression: return squared();
      case TaskType::binary: return logistic();
      case TaskType::multiclass: return softmax(task.classes());
    }
    return squared();
  }

  LossType type() const { return type_; }
  int classes() const { return classes_; }
  // Margin columns per row.
  int width() const { return type_ == LossType::softmax ? classes_ : 1; }

  std::string name() const {
    switch (type_) {
      case LossType::squared: return "squared";
      case LossType::logistic: return "logistic";
      case LossType::softmax: return "softmax";
    }
    return "unknown";
  }

  friend bool operator==(const LossKind&, const LossKind&) = default;

 private:
  LossKind(LossType type, int classes) : type_(type), classes_(classes) {}
  LossType type_;
  int classes_;
};

inline LossKind parse_loss(const std::string& name, int classes = 0) {
  if (name == "squared") return LossKind::squared();
  if (name == "logistic") return LossKind::logistic();
  if (name == "softmax") return LossKind::softmax(classes);
  throw ConfigError("unknown loss '" + name + "'");
}

inline double sigmoid(double m) {
  if (m >= 0) return 1.0 / (1.0 + std::exp(-m));
  const double e = std::exp(m);
  return e / (1.0 + e);
}

// log(1 + exp(m)) without overflow.
inline double softplus(double m) { return m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m)); }

inline double log_sum_exp(const double* m, int k) {
  const double top = *std::max_element(m, m + k);
  double s = 0.0;
  for (int j = 0; j < k; ++j) s += std::exp(m[j] - top);
  return top + std::log(s);
}

// Loss of one row; `margin` points at width() values.
inline double loss_value(const LossKind& loss, double y, const double* margin) {
  switch (loss.type()) {
    case LossType::squared: return 0.5 * (margin[0] - y) * (margin[0] - y);
    case LossType::logistic: return softplus(margin[0]) - y * margin[0];
    case LossType::softmax: return log_sum_exp(margin, loss.classes()) - margin[static_cast<int>(y)];
  }
  return 0.0;
}

// Per-margin gradient and (diagonal) hessian of one row.
inline void loss_grad_hess(const LossKind& loss, double y, const double* margin, double* grad, double* hess) {
  switch (loss.type()) {
    case LossType::squared:
      grad[0] = margin[0] - y;
      hess[0] = 1.0;
      return;
    case LossType::logistic: {
      const double p = sigmoid(margin[0]);
      grad[0] = p - y;
      hess[0] = p * (1.0 - p);
      return;
    }
    case LossType::softmax: {
      const int k = loss.classes();
      const double lse = log_sum_exp(margin, k);
      const int label = static_cast<int>(y);
      for (int j = 0; j < k; ++j) {
        const double p = std::exp(margin[j] - lse);
        grad[j] = p - (j == label ? 1.0 : 0.0);
        hess[j] = p * (1.0 - p);
      }
      return;
    }
  }
}

// Sigmoid or row-wise softmax of raw margins. Binary gives one column
// holding P(y = 1).
inline Matrix margin_to_proba(const Matrix& margins, const LossKind& loss) {
  if (loss.type() == LossType::squared) throw ConfigError("probabilities are undefined for squared loss");
  Matrix out(margins.rows(), margins.cols());
  if (loss.type() == LossType::logistic) {
    for (Index i = 0; i < margins.rows(); ++i) out(i, 0) = sigmoid(margins(i, 0));
    return out;
  }
  for (Index i = 0; i < margins.rows(); ++i) {
    const double lse = log_sum_exp(margins.row(i).data(), static_cast<int>(margins.cols()));
    for (Index j = 0; j < margins.cols(); ++j) out(i, j) = std::exp(margins(i, j) - lse);
  }
  return out;
}

// Prediction in label space: identity for squared loss, probabilities otherwise.
inline Matrix apply_link(const Matrix& margins, const LossKind& loss) {
  return loss.type() == LossType::squared ? margins : margin_to_proba(margins, loss);
}

// Mean (weighted) training loss over rows.
inline double mean_loss(const LossKind& loss, const Vector& y, const Matrix& margins, const Vector* weights = nullptr) {
  double total = 0.0, wsum = 0.0;
  for (Index i = 0; i < y.size(); ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    total += w * loss_value(loss, y[i], margins.row(i).data());
    wsum += w;
  }
  return wsum > 0 ? total / wsum : 0.0;
}

}  // namespace mrda
