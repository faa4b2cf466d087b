#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "mrda/error.hpp"

namespace mrda {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using IndexList = std::vector<Index>;

enum class TaskType { regression, binary, multiclass };

// Outcome space of a learning task. Immutable once built.
class TaskKind {
 public:
  static TaskKind regression() { return TaskKind(TaskType::regression, 1); }
  static TaskKind binary() { return TaskKind(TaskType::binary, 2); }
  static TaskKind multiclass(int classes) {
    if (classes < 3) {
      throw ConfigError("multiclass task needs at least 3 classes, got " + std::to_string(classes));
    }
    return TaskKind(TaskType::multiclass, classes);
  }

  TaskType type() const { return type_; }
  // Number of classes; 1 for regression.
  int classes() const { return classes_; }
  // Number of margin columns a model emits: K for multiclass, 1 otherwise.
  int margin_width() const { return type_ == TaskType::multiclass ? classes_ : 1; }
  bool is_classification() const { return type_ != TaskType::regression; }

  std::string name() const {
    switch (type_) {
      case TaskType::regression: return "regression";
      case TaskType::binary: return "binary";
      case TaskType::multiclass: return "multiclass";
    }
    return "unknown";
  }

  friend bool operator==(const TaskKind&, const TaskKind&) = default;

 private:
  TaskKind(TaskType type, int classes) : type_(type), classes_(classes) {}

  TaskType type_;
  int classes_;
};

inline TaskKind parse_task(const std::string& name, int classes = 0) {
  if (name == "regression") return TaskKind::regression();
  if (name == "binary") return TaskKind::binary();
  if (name == "multiclass") return TaskKind::multiclass(classes);
  throw ConfigError("unknown task '" + name + "' (expected regression, binary or multiclass)");
}

// Gathers the listed rows of a matrix.
inline Matrix take_rows(const Matrix& x, const IndexList& rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
  return out;
}

inline Vector take(const Vector& v, const IndexList& rows) {
  Vector out(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Index>(i)] = v[rows[i]];
  return out;
}

template <class T>
std::vector<T> take(const std::vector<T>& v, const IndexList& rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(v[static_cast<std::size_t>(r)]);
  return out;
}

}  // namespace mrda
