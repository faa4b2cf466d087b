#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "mrda/data.hpp"
#include "mrda/mr.hpp"
#include "mrda/weights.hpp"

namespace mrda {

enum class MetricKind { mse, ce, brier };

inline std::string to_string(MetricKind k) {
  switch (k) {
    case MetricKind::mse: return "mse";
    case MetricKind::ce: return "ce";
    case MetricKind::brier: return "brier";
  }
  return "unknown";
}

inline MetricKind parse_metric(const std::string& name) {
  if (name == "mse") return MetricKind::mse;
  if (name == "ce") return MetricKind::ce;
  if (name == "brier") return MetricKind::brier;
  throw ConfigError("unknown metric '" + name + "' (expected mse, ce or brier)");
}

inline MetricKind default_metric(const TaskKind& task) {
  return task.is_classification() ? MetricKind::ce : MetricKind::mse;
}

struct MetricValue {
  double value = 0.0;
  double se = 0.0;
  Index n = 0;
  double n_eff = 0.0;
};

// Per-row losses. Predictions are in label space: one value column for
// regression, P(y = 1) for binary, one probability per class otherwise.
inline Vector per_sample_loss(const Vector& y, const Matrix& pred, MetricKind kind, const TaskKind& task) {
  if (pred.rows() != y.size()) throw ConfigError("predictions and labels have different lengths");
  const Index n = y.size();
  Vector out(n);
  if (kind == MetricKind::mse) {
    if (task.is_classification()) throw ConfigError("mse applies to regression tasks");
    if (pred.cols() != 1) throw ConfigError("regression predictions need one column");
    for (Index i = 0; i < n; ++i) out[i] = (pred(i, 0) - y[i]) * (pred(i, 0) - y[i]);
    return out;
  }
  if (!task.is_classification()) throw ConfigError(to_string(kind) + " applies to classification tasks");
  constexpr double kTiny = 1e-12;
  if (task.type() == TaskType::binary) {
    if (pred.cols() != 1) throw ConfigError("binary predictions need one probability column");
    for (Index i = 0; i < n; ++i) {
      const double p = pred(i, 0);
      if (kind == MetricKind::brier) {
        out[i] = (p - y[i]) * (p - y[i]);
      } else {
        const double q = std::clamp(y[i] == 1.0 ? p : 1.0 - p, kTiny, 1.0 - kTiny);
        out[i] = -std::log(q);
      }
    }
    return out;
  }
  if (pred.cols() != task.classes()) throw ConfigError("multiclass predictions need one column per class");
  for (Index i = 0; i < n; ++i) {
    const auto label = static_cast<Index>(y[i]);
    if (kind == MetricKind::brier) {
      double total = 0.0;
      for (Index k = 0; k < pred.cols(); ++k) {
        const double d = pred(i, k) - (k == label ? 1.0 : 0.0);
        total += d * d;
      }
      out[i] = total;
    } else {
      out[i] = -std::log(std::clamp(pred(i, label), kTiny, 1.0 - kTiny));
    }
  }
  return out;
}

// Weighted mean of per-row losses with se = weighted sd / sqrt(n_eff).
inline MetricValue summarize_losses(const Vector& losses, const Vector* weights = nullptr) {
  MetricValue m;
  m.n = losses.size();
  if (m.n == 0) throw DataError("cannot summarize zero rows");
  Vector w = weights ? *weights : Vector::Ones(m.n);
  if (w.size() != m.n) throw ConfigError("sample weights misaligned with rows");
  if ((w.array() < 0.0).any()) throw ConfigError("sample weights must be nonnegative");
  const double sw = w.sum();
  if (!(sw > 0.0)) throw DataError("sample weights sum to zero");
  m.value = w.dot(losses) / sw;
  const double var = w.dot((losses.array() - m.value).square().matrix()) / sw;
  m.n_eff = sw * sw / w.squaredNorm();
  m.se = std::sqrt(std::max(var, 0.0) / m.n_eff);
  return m;
}

inline MetricValue metric(const Vector& y, const Matrix& pred, MetricKind kind, const TaskKind& task,
                          const Vector* weights = nullptr) {
  return summarize_losses(per_sample_loss(y, pred, kind, task), weights);
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string segment;  // "overall" for the pooled row
  MetricValue value;
  std::optional<MetricValue> baseline;
  std::optional<double> relative;  // value / baseline value
};

struct SegmentReport {
  MetricKind kind = MetricKind::mse;
  std::vector<ReportRow> rows;  // segments in id order, then overall

  const ReportRow& overall() const { return rows.back(); }
};

inline SegmentReport per_segment_report(const Vector& y, const Matrix& pred, const std::vector<int>& segments,
                                        const std::vector<std::string>& segment_names, const Matrix* baseline,
                                        MetricKind kind, const TaskKind& task, const Vector* weights = nullptr) {
  if (static_cast<Index>(segments.size()) != y.size()) throw ConfigError("segment ids misaligned with labels");
  if (baseline && baseline->rows() != pred.rows()) throw ConfigError("baseline predictions misaligned with rows");
  const Vector losses = per_sample_loss(y, pred, kind, task);
  std::optional<Vector> base_losses;
  if (baseline) base_losses = per_sample_loss(y, *baseline, kind, task);

  std::vector<IndexList> groups(segment_names.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const int s = segments[i];
    if (s < 0 || s >= static_cast<int>(groups.size())) throw ConfigError("segment id out of range");
    groups[static_cast<std::size_t>(s)].push_back(static_cast<Index>(i));
  }
  auto make_row = [&](const std::string& name, const IndexList* rows) {
    ReportRow r;
    r.segment = name;
    const Vector l = rows ? take(losses, *rows) : losses;
    std::optional<Vector> w;
    if (weights) w = rows ? take(*weights, *rows) : *weights;
    r.value = summarize_losses(l, w ? &*w : nullptr);
    if (base_losses) {
      const Vector bl = rows ? take(*base_losses, *rows) : *base_losses;
      r.baseline = summarize_losses(bl, w ? &*w : nullptr);
      r.relative = r.value.value / r.baseline->value;
    }
    return r;
  };

  SegmentReport report;
  report.kind = kind;
  for (std::size_t s = 0; s < groups.size(); ++s) {
    if (groups[s].empty()) throw DataError("segment '" + segment_names[s] + "' has no rows to evaluate");
    report.rows.push_back(make_row(segment_names[s], &groups[s]));
  }
  report.rows.push_back(make_row("overall", nullptr));
  return report;
}

// Aligned text table using the "value (se)" convention.
inline std::string format_report(const SegmentReport& report) {
  const bool has_baseline = !report.rows.empty() && report.rows.front().baseline.has_value();
  std::size_t width = 7;
  for (const auto& r : report.rows) width = std::max(width, r.segment.size());
  auto cell = [](const MetricValue& v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f (%.4f)", v.value, v.se);
    return std::string(buf);
  };
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s %8s  %-20s", static_cast<int>(width), "segment", "n", to_string(report.kind).c_str());
  out += line;
  if (has_baseline) {
    std::snprintf(line, sizeof line, "  %-20s  %8s", "baseline", "relative");
    out += line;
  }
  out += "\n";
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof line, "%-*s %8lld  %-20s", static_cast<int>(width), r.segment.c_str(),
                  static_cast<long long>(r.value.n), cell(r.value).c_str());
    out += line;
    if (r.baseline) {
      std::snprintf(line, sizeof line, "  %-20s  %8.4f", cell(*r.baseline).c_str(), *r.relative);
      out += line;
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct CvGrid {
  std::vector<int> base_n_estimators{10, 25, 50, 200, 300, 500};
  std::vector<int> base_max_depth{2, 3, 5, 7};
  std::vector<double> base_subsample{0.8, 1.0};
  std::vector<double> base_colsample_bytree{0.8, 1.0};
  std::vector<double> base_learning_rate{0.1};
  std::vector<double> refine_learning_rate{0.001, 0.01, 0.1};
  std::vector<int> refine_n_estimators{0, 10, 25, 50};
  std::vector<int> refine_max_depth{0, 1, 3};
  std::vector<double> refine_subsample{0.8, 1.0};
  std::vector<double> refine_colsample_bytree{0.8, 1.0};

  void validate() const {
    auto nonempty = [](const auto& v, const char* name) {
      if (v.empty()) throw ConfigError(std::string("cv grid list '") + name + "' is empty");
    };
    nonempty(base_n_estimators, "base_n_estimators");
    nonempty(base_max_depth, "base_max_depth");
    nonempty(base_subsample, "base_subsample");
    nonempty(base_colsample_bytree, "base_colsample_bytree");
    nonempty(base_learning_rate, "base_learning_rate");
    nonempty(refine_learning_rate, "refine_learning_rate");
    nonempty(refine_n_estimators, "refine_n_estimators");
    nonempty(refine_max_depth, "refine_max_depth");
    nonempty(refine_subsample, "refine_subsample");
    nonempty(refine_colsample_bytree, "refine_colsample_bytree");
  }

  // A grid holding only the given configs, for fixed-setting runs.
  static CvGrid single(const GbtConfig& base, const GbtConfig& refine) {
    CvGrid g;
    g.base_n_estimators = {base.n_estimators};
    g.base_max_depth = {base.max_depth};
    g.base_subsample = {base.subsample};
    g.base_colsample_bytree = {base.colsample_bytree};
    g.base_learning_rate = {base.learning_rate};
    g.refine_learning_rate = {refine.learning_rate};
    g.refine_n_estimators = {refine.n_estimators};
    g.refine_max_depth = {refine.max_depth};
    g.refine_subsample = {refine.subsample};
    g.refine_colsample_bytree = {refine.colsample_bytree};
    return g;
  }
};

struct GbtParams {
  int n_estimators = 0;
  int max_depth = 0;
  double learning_rate = 0.1;
  double subsample = 1.0;
  double colsample_bytree = 1.0;

  auto key() const { return std::tuple(n_estimators, max_depth, learning_rate, subsample, colsample_bytree); }
  friend bool operator<(const GbtParams& a, const GbtParams& b) { return a.key() < b.key(); }
  friend bool operator==(const GbtParams& a, const GbtParams& b) { return a.key() == b.key(); }

  GbtConfig apply(GbtConfig cfg) const {
    cfg.n_estimators = n_estimators;
    cfg.max_depth = max_depth;
    cfg.learning_rate = learning_rate;
    cfg.subsample = subsample;
    cfg.colsample_bytree = colsample_bytree;
    return cfg;
  }
};

struct GridPoint {
  GbtParams base;
  GbtParams refine;

  friend bool operator<(const GridPoint& a, const GridPoint& b) {
    return std::tie(a.base, a.refine) < std::tie(b.base, b.refine);
  }
};

namespace detail {

template <class T>
std::vector<T> canonical(std::vector<T> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

inline std::vector<GbtParams> expand(const std::vector<int>& n_est, const std::vector<int>& depth,
                                     const std::vector<double>& lr, const std::vector<double>& sub,
                                     const std::vector<double>& col) {
  std::vector<GbtParams> out;
  for (int a : canonical(n_est))
    for (int b : canonical(depth))
      for (double c : canonical(lr))
        for (double d : canonical(sub))
          for (double e : canonical(col)) out.push_back({a, b, c, d, e});
  return out;
}

}  // namespace detail

// Grid points in canonical (sorted, deduplicated) order.
inline std::vector<GridPoint> grid_points(const CvGrid& grid) {
  grid.validate();
  const auto base = detail::expand(grid.base_n_estimators, grid.base_max_depth, grid.base_learning_rate,
                                   grid.base_subsample, grid.base_colsample_bytree);
  const auto refine = detail::expand(grid.refine_n_estimators, grid.refine_max_depth, grid.refine_learning_rate,
                                     grid.refine_subsample, grid.refine_colsample_bytree);
  std::vector<GridPoint> out;
  for (const auto& b : base)
    for (const auto& r : refine) out.push_back({b, r});
  return out;
}

struct GridScore {
  GridPoint point;
  double mean_loss = std::numeric_limits<double>::infinity();
  int folds_ok = 0;
  std::vector<SegmentReport> fold_reports;
};

struct CvResult {
  GridPoint best;
  MrConfig best_config;
  MetricKind kind = MetricKind::mse;
  std::vector<GridScore> scores;  // canonical grid order; excluded points have folds_ok == 0
  std::vector<std::string> warnings;

  const GridScore& best_score() const {
    for (const auto& s : scores) {
      if (!(s.point < best) && !(best < s.point)) return s;
    }
    throw Error("best grid point missing from scores");
  }
};

// Importance weights for a validation fold against the test rows of the
// same segment, computed once per fold.
inline Vector validation_weights(const Dataset& fit_fold, const Dataset& valid, const Dataset& test_features,
                                 const MrConfig& cfg, std::uint64_t fold_seed, std::vector<std::string>& warnings) {
  Vector weights = Vector::Ones(valid.rows());
  if (cfg.weight_method == WeightMethod::none) return weights;
  const int ns = valid.n_segments();
  std::vector<IndexList> valid_rows = valid.rows_by_segment(), test_rows(static_cast<std::size_t>(ns));
  for (Index j = 0; j < test_features.rows(); ++j) {
    const int s = test_features.segment[static_cast<std::size_t>(j)];
    if (s >= 0 && s < ns) test_rows[static_cast<std::size_t>(s)].push_back(j);
  }
  std::vector<int> valid_pred, test_pred;
  if (cfg.weight_method == WeightMethod::bbse) {
    // Label-shift weights need a classifier trained without the fold.
    const GbtModel clf = fit_gbt(fit_fold.features, fit_fold.labels, LossKind::for_task(fit_fold.task),
                                 seeded(cfg.global, derive_seed(fold_seed, 0xbb5e)));
    valid_pred = detail::argmax_rows(predict_margin(clf, valid.features));
    test_pred = detail::argmax_rows(predict_margin(clf, test_features.features));
  }
  for (int s = 0; s < ns; ++s) {
    const auto& rows = valid_rows[static_cast<std::size_t>(s)];
    if (rows.empty()) continue;
    const auto& name = valid.segment_names[static_cast<std::size_t>(s)];
    SegmentWeightInputs in;
    in.eval_x = take_rows(valid.features, rows);
    in.fit_x = in.eval_x;
    in.eval_y = take(valid.labels, rows);
    in.test_x = take_rows(test_features.features, test_rows[static_cast<std::size_t>(s)]);
    if (cfg.weight_method == WeightMethod::bbse) {
      in.source_labels = detail::class_labels(in.eval_y);
      in.source_predicted = take(valid_pred, rows);
      in.test_predicted = take(test_pred, test_rows[static_cast<std::size_t>(s)]);
    }
    const WeightVector w = estimate_segment_weights(cfg, valid.task, in, derive_seed(fold_seed, name_hash(name), 3),
                                                    name, warnings);
    for (std::size_t i = 0; i < rows.size(); ++i) weights[rows[i]] = w.values[static_cast<Index>(i)];
  }
  return weights;
}

inline CvResult cross_validate(const Dataset& train, const Dataset& test_features, const CvGrid& grid, int k,
                               const MrConfig& cfg) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2");
  cfg.validate(train.task);
  if (!train.has_labels()) throw ConfigError("cross-validation needs labeled training rows");
  const auto points = grid_points(grid);
  const auto folds = kfold_plan(train, k, derive_seed(cfg.seed, 0xcf));

  CvResult result;
  result.kind = default_metric(train.task);
  result.scores.resize(points.size());
  for (std::size_t p = 0; p < points.size(); ++p) result.scores[p].point = points[p];
  std::vector<double> totals(points.size(), 0.0);

  for (std::size_t f = 0; f < folds.size(); ++f) {
    const std::uint64_t fold_seed = derive_seed(cfg.seed, 0xf01d, f);
    const Dataset fit_fold = train.subset(folds[f].train_indices);
    const Dataset valid = train.subset(folds[f].valid_indices);
    const Vector vw = validation_weights(fit_fold, valid, test_features, cfg, fold_seed, result.warnings);

    std::size_t p = 0;
    while (p < points.size()) {
      // Points sharing base parameters share one prepared model.
      std::size_t end = p;
      while (end < points.size() && points[end].base == points[p].base) ++end;
      MrConfig local = cfg;
      local.seed = fold_seed;
      local.base = points[p].base.apply(cfg.base);
      std::optional<MrPrepared> prep;
      std::string failure;
      try {
        prep = prepare_mr(fit_fold, test_features, local);
      } catch (const Error& e) {
        failure = e.what();
      }
      for (std::size_t q = p; q < end; ++q) {
        GridScore& score = result.scores[q];
        try {
          if (!prep) throw Error(failure);
          const MrModel model = refine_mr(*prep, points[q].refine.apply(cfg.refine));
          const Matrix pred = predict(model, valid.features, valid.segment);
          SegmentReport report = per_segment_report(valid.labels, pred, valid.segment, valid.segment_names, nullptr,
                                                    result.kind, valid.task, &vw);
          totals[q] += report.overall().value.value;
          score.fold_reports.push_back(std::move(report));
          ++score.folds_ok;
        } catch (const Error& e) {
          result.warnings.push_back("grid point " + std::to_string(q) + " failed on fold " + std::to_string(f) + ": " +
                                    e.what());
        }
      }
      p = end;
    }
  }

  bool found = false;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < points.size(); ++p) {
    GridScore& score = result.scores[p];
    if (score.folds_ok == 0) {
      result.warnings.push_back("grid point " + std::to_string(p) + " failed on every fold; excluded");
      continue;
    }
    score.mean_loss = totals[p] / score.folds_ok;
    if (score.mean_loss < best) {
      best = score.mean_loss;
      result.best = score.point;
      found = true;
    }
  }
  if (!found) throw DataError("every grid point failed on every fold");
  result.best_config = cfg;
  result.best_config.base = result.best.base.apply(cfg.base);
  result.best_config.refine = result.best.refine.apply(cfg.refine);
  return result;
}

}  // namespace mrda
