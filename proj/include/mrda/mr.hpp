#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mrda/data.hpp"
#include "mrda/gbt.hpp"
#include "mrda/linear.hpp"
#include "mrda/parallel.hpp"
#include "mrda/segmentation.hpp"
#include "mrda/weights.hpp"

namespace mrda {

enum class ShiftType { covariate, label };

inline std::string to_string(ShiftType s) { return s == ShiftType::covariate ? "covariate" : "label"; }

inline ShiftType parse_shift(const std::string& name) {
  if (name == "covariate") return ShiftType::covariate;
  if (name == "label") return ShiftType::label;
  throw ConfigError("unknown shift type '" + name + "' (expected covariate or label)");
}

// How segments are grouped for base-model training.
struct ClusterPolicy {
  enum class Kind { automatic, fixed, explicit_clusters };
  Kind kind = Kind::automatic;
  int m = 0;                                   // fixed
  std::vector<std::vector<std::string>> sets;  // explicit, by segment name
};

struct MrConfig {
  ShiftType shift = ShiftType::covariate;
  WeightMethod weight_method = WeightMethod::discriminative;
  double eta = kDefaultEta;
  double varsigma = 0.8;
  ClusterPolicy clusters;
  KernelSpec kernel;
  Index max_per_segment = 2000;
  GbtConfig base = GbtConfig::cluster_defaults();     // per-cluster and all-segments base models
  GbtConfig global = GbtConfig::library_defaults();   // global baseline and DR base model
  GbtConfig refine = GbtConfig::refine_defaults();    // stage 2 and DR refinement
  bool ball = true;
  bool intercept = true;
  double lambda_min = 1e-8;
  double lambda_max = 1e6;
  std::uint64_t seed = 0;
  unsigned threads = 0;

  void validate(const TaskKind& task) const {
    if (!(eta > 0.0)) throw ConfigError("eta must be positive");
    if (!(varsigma > 0.0 && varsigma < 1.0)) throw ConfigError("varsigma must lie in (0, 1)");
    if (!(lambda_max > lambda_min && lambda_min > 0.0)) throw ConfigError("need 0 < lambda_min < lambda_max");
    if (weight_method == WeightMethod::bbse && !task.is_classification()) {
      throw ConfigError("bbse weights need a classification task");
    }
    if (shift == ShiftType::label && weight_method != WeightMethod::bbse && weight_method != WeightMethod::none) {
      throw ConfigError("label shift supports weight methods bbse or none");
    }
    if (shift == ShiftType::covariate && weight_method == WeightMethod::bbse) {
      throw ConfigError("bbse corrects label shift; use --shift label");
    }
    base.validate();
    global.validate();
    refine.validate();
  }
};

// ---------------------------------------------------------------------------
// Base ensemble

// h_1..h_M trained on clusters of segments plus h_{M+1} on all segments.
struct BaseEnsemble {
  std::vector<GbtModel> models;
  ClusterAssignment clusters;
  LossKind loss = LossKind::squared();

  std::size_t size() const { return models.size(); }

  // margins[m] is the n x width margin matrix of model m.
  std::vector<Matrix> margins(const Matrix& x) const {
    std::vector<Matrix> out;
    out.reserve(models.size());
    for (const auto& model : models) out.push_back(predict_margin(model, x));
    return out;
  }
};

inline std::uint64_t cluster_seed(std::uint64_t seed, const std::vector<int>& members,
                                  const std::vector<std::string>& names) {
  std::vector<std::string> sorted;
  for (int s : members) sorted.push_back(names[static_cast<std::size_t>(s)]);
  std::sort(sorted.begin(), sorted.end());
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (const auto& name : sorted) h = mix64(h ^ name_hash(name));
  return derive_seed(seed, h);
}

inline BaseEnsemble fit_base_ensemble(const Dataset& train_base, const ClusterAssignment& clusters,
                                      const GbtConfig& cfg, unsigned threads = 0) {
  if (!train_base.has_labels()) throw ConfigError("base ensemble needs labeled rows");
  const auto cluster_of = clusters.cluster_of();
  const std::size_t m = clusters.clusters.size();
  std::vector<IndexList> rows(m + 1);
  for (Index i = 0; i < train_base.rows(); ++i) {
    const int s = train_base.segment[static_cast<std::size_t>(i)];
    if (s < static_cast<int>(cluster_of.size()) && cluster_of[static_cast<std::size_t>(s)] >= 0) {
      rows[static_cast<std::size_t>(cluster_of[static_cast<std::size_t>(s)])].push_back(i);
    }
    rows[m].push_back(i);
  }
  for (std::size_t c = 0; c < m; ++c) {
    if (rows[c].empty()) throw DataError("cluster " + std::to_string(c) + " has no base training rows");
  }
  BaseEnsemble ensemble;
  ensemble.clusters = clusters;
  ensemble.loss = LossKind::for_task(train_base.task);
  ensemble.models.resize(m + 1);
  std::vector<int> all_segments;
  for (int s = 0; s < train_base.n_segments(); ++s) all_segments.push_back(s);
  parallel_for(m + 1, threads, [&](std::size_t c) {
    GbtConfig local = cfg;
    local.seed = cluster_seed(cfg.seed, c < m ? clusters.clusters[c] : all_segments, train_base.segment_names);
    const Matrix x = take_rows(train_base.features, rows[c]);
    const Vector y = take(train_base.labels, rows[c]);
    ensemble.models[c] = fit_gbt(x, y, ensemble.loss, local);
  });
  return ensemble;
}

// ---------------------------------------------------------------------------
// Stage 1: per-segment linear stacking of base margins

struct Stage1Model {
  Vector beta;       // one weight per base model, shared across classes
  Vector intercept;  // width(); zero when disabled
  double lambda = 0.0;
  bool hit_lambda_max = false;
  int segment = -1;
};

// Stage-1 margin: intercept_k + sum_m beta_m * margins[m](i, k).
inline Matrix stage1_margin(const Stage1Model& stage1, const std::vector<Matrix>& base_margins) {
  if (base_margins.size() != static_cast<std::size_t>(stage1.beta.size())) {
    throw ConfigError("stage-1 coefficients do not match the base ensemble size");
  }
  Matrix out = Matrix::Zero(base_margins.front().rows(), base_margins.front().cols());
  out.rowwise() += stage1.intercept.transpose();
  for (std::size_t m = 0; m < base_margins.size(); ++m) out += stage1.beta[static_cast<Index>(m)] * base_margins[m];
  return out;
}

struct Stage1Options {
  bool ball = true;
  bool intercept = true;
  double lambda_min = 1e-8;
  double lambda_max = 1e6;
  int max_bisections = 60;
  // Bisection stops once ||beta|| lands in [1 - norm_tolerance, 1].
  double norm_tolerance = 1e-6;
};

namespace detail {

inline GlmProblem stage1_problem(const std::vector<Matrix>& base_margins, const Vector& y, const LossKind& loss,
                                 bool intercept) {
  const Index n = base_margins.front().rows();
  const int width = loss.width();
  const auto n_models = static_cast<Index>(base_margins.size());
  const Index n_intercepts = intercept ? width : 0;
  GlmProblem p;
  p.y = y;
  p.loss = loss;
  p.weights = Vector::Ones(n);
  p.penalty = Vector::Zero(n_models + n_intercepts);
  for (int k = 0; k < width; ++k) {
    Matrix design = Matrix::Zero(n, n_models + n_intercepts);
    for (Index m = 0; m < n_models; ++m) design.col(m) = base_margins[static_cast<std::size_t>(m)].col(k);
    if (intercept) design.col(n_models + k).setOnes();
    p.design.push_back(std::move(design));
  }
  return p;
}

inline Stage1Model stage1_solve(GlmProblem& p, Index n_models, int width, bool intercept, double lambda) {
  p.penalty.head(n_models).setConstant(lambda);
  GlmOptions opt;
  opt.reject_singular = false;
  const GlmFit fit = solve_glm(p, opt);
  Stage1Model out;
  out.beta = fit.theta.head(n_models);
  out.intercept = intercept ? Vector(fit.theta.segment(n_models, width)) : Vector::Zero(width);
  out.lambda = lambda;
  return out;
}

}  // namespace detail

// Fits the stage-1 combination on precomputed base margins. With the
// ball restriction, bisects log(lambda) until ||beta|| <= 1.
inline Stage1Model fit_stage1_margins(const std::vector<Matrix>& base_margins, const Vector& y, const LossKind& loss,
                                      const Stage1Options& opt = {}) {
  if (base_margins.empty()) throw ConfigError("stage 1 needs at least one base model");
  const auto n_models = static_cast<Index>(base_margins.size());
  const int width = loss.width();
  GlmProblem p = detail::stage1_problem(base_margins, y, loss, opt.intercept);

  Stage1Model best = detail::stage1_solve(p, n_models, width, opt.intercept, opt.lambda_min);
  if (!opt.ball || best.beta.norm() <= 1.0) return best;

  Stage1Model upper = detail::stage1_solve(p, n_models, width, opt.intercept, opt.lambda_max);
  if (upper.beta.norm() > 1.0) {
    upper.hit_lambda_max = true;
    return upper;
  }
  double lo = std::log(opt.lambda_min), hi = std::log(opt.lambda_max);
  for (int it = 0; it < opt.max_bisections; ++it) {
    const double mid = 0.5 * (lo + hi);
    Stage1Model candidate = detail::stage1_solve(p, n_models, width, opt.intercept, std::exp(mid));
    const double norm = candidate.beta.norm();
    if (norm > 1.0) {
      lo = mid;
    } else {
      hi = mid;
      upper = std::move(candidate);
      if (norm >= 1.0 - opt.norm_tolerance) break;
    }
  }
  return upper;
}

inline Stage1Model fit_stage1(const Matrix& x, const Vector& y, const BaseEnsemble& ensemble,
                              const Stage1Options& opt = {}) {
  if (y.size() < 1) throw DataError("stage 1 needs tune rows");
  if (y.size() != x.rows()) throw ConfigError("stage-1 labels misaligned with rows");
  return fit_stage1_margins(ensemble.margins(x), y, ensemble.loss, opt);
}

// ---------------------------------------------------------------------------
// Stage 2: weighted refinement over the stage-1 margin

inline GbtModel fit_stage2(const Matrix& x, const Vector& y, const Stage1Model& stage1, const BaseEnsemble& ensemble,
                           const WeightVector& weights, const GbtConfig& refine) {
  if (weights.values.size() != x.rows() || y.size() != x.rows()) throw ConfigError("stage-2 inputs have mismatched lengths");
  const Matrix delta = stage1_margin(stage1, ensemble.margins(x));
  return fit_gbt(x, y, ensemble.loss, refine, &weights.values, &delta);
}

// ---------------------------------------------------------------------------
// Global models: plain boosted baseline, DR and DR with segment features

struct GlobalModel {
  GbtModel base;
  std::optional<GbtModel> refiner;
  bool segment_onehot = false;
  int n_segments = 0;
  Index n_features = 0;  // raw feature width, before one-hot columns

  Index input_width() const { return n_features + (segment_onehot ? n_segments : 0); }
};

inline Matrix with_segment_onehot(const Matrix& x, const std::vector<int>& segments, int n_segments) {
  Matrix out = Matrix::Zero(x.rows(), x.cols() + n_segments);
  out.leftCols(x.cols()) = x;
  for (Index i = 0; i < x.rows(); ++i) {
    const int s = segments[static_cast<std::size_t>(i)];
    if (s >= 0 && s < n_segments) out(i, x.cols() + s) = 1.0;
  }
  return out;
}

inline Matrix predict_margin(const GlobalModel& model, const Matrix& x, const std::vector<int>& segments) {
  if (x.cols() != model.n_features) throw ConfigError("feature width does not match the global model");
  const Matrix input = model.segment_onehot ? with_segment_onehot(x, segments, model.n_segments) : x;
  Matrix margin = predict_margin(model.base, input);
  if (model.refiner) margin = predict_margin(*model.refiner, input, &margin);
  return margin;
}

struct WeightSummary {
  WeightMethod method = WeightMethod::none;
  Index n = 0;
  double min = 1.0, mean = 1.0, max = 1.0;
  double eta = kDefaultEta;
  double normalization_factor = 1.0;

  static WeightSummary of(const WeightVector& w) {
    WeightSummary s;
    s.method = w.method;
    s.n = w.values.size();
    if (s.n > 0) {
      s.min = w.values.minCoeff();
      s.mean = w.values.mean();
      s.max = w.values.maxCoeff();
    }
    s.eta = w.eta;
    s.normalization_factor = w.normalization_factor;
    return s;
  }
};

namespace detail {

inline std::vector<int> argmax_rows(const Matrix& margins) {
  std::vector<int> out(static_cast<std::size_t>(margins.rows()));
  for (Index i = 0; i < margins.rows(); ++i) {
    if (margins.cols() == 1) {
      out[static_cast<std::size_t>(i)] = margins(i, 0) > 0.0 ? 1 : 0;
    } else {
      Index best;
      margins.row(i).maxCoeff(&best);
      out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
  }
  return out;
}

inline std::vector<int> class_labels(const Vector& y) {
  std::vector<int> out(static_cast<std::size_t>(y.size()));
  for (Index i = 0; i < y.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(y[i]);
  return out;
}

}  // namespace detail

// Inputs for one segment's importance weights. Rows in eval_x receive
// weights; fit_x are the segment's training rows used to learn the ratio.
struct SegmentWeightInputs {
  Matrix fit_x;
  Matrix eval_x;
  Vector eval_y;
  Matrix test_x;
  // Label shift: held-out source labels/predictions and test predictions.
  std::vector<int> source_labels, source_predicted, test_predicted;
};

inline WeightVector estimate_segment_weights(const MrConfig& cfg, const TaskKind& task, const SegmentWeightInputs& in,
                                             std::uint64_t seed, const std::string& segment_name,
                                             std::vector<std::string>& warnings) {
  const Index n = in.eval_x.rows();
  if (cfg.weight_method == WeightMethod::none) return WeightVector::uniform(n);
  if (in.test_x.rows() == 0) {
    warnings.push_back("segment '" + segment_name + "' has no test rows; using uniform weights");
    return WeightVector::uniform(n);
  }
  switch (cfg.weight_method) {
    case WeightMethod::discriminative: {
      const auto classifier = fit_density_ratio_classifier(in.fit_x, in.test_x);
      return clip_and_normalize(classifier.odds(in.eval_x), cfg.eta, WeightMethod::discriminative);
    }
    case WeightMethod::kmm: {
      if (n < 2) {
        warnings.push_back("segment '" + segment_name + "' has fewer than 2 rows for KMM; using uniform weights");
        return WeightVector::uniform(n);
      }
      KmmOptions opt;
      opt.bandwidth = cfg.kernel.feature_bandwidth;
      opt.seed = seed;
      return fit_kmm(in.eval_x, in.test_x, cfg.eta, opt);
    }
    case WeightMethod::bbse: {
      try {
        const auto cw = fit_bbse(in.source_labels, in.source_predicted, in.test_predicted, task.classes());
        return expand_class_weights(cw, in.eval_y, cfg.eta);
      } catch (const Error& e) {
        warnings.push_back("segment '" + segment_name + "': " + e.what() + "; using uniform weights");
        return WeightVector::uniform(n);
      }
    }
    case WeightMethod::none: break;
  }
  return WeightVector::uniform(n);
}

inline GbtConfig seeded(GbtConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  return cfg;
}

// Segment-blind boosted model on all training rows (the plain baseline).
inline GlobalModel fit_global_gbt(const Dataset& train, const MrConfig& cfg, bool segment_onehot = false) {
  GlobalModel model;
  model.segment_onehot = segment_onehot;
  model.n_segments = train.n_segments();
  model.n_features = train.dims();
  const Matrix input = segment_onehot ? with_segment_onehot(train.features, train.segment, train.n_segments())
                                      : train.features;
  model.base = fit_gbt(input, train.labels, LossKind::for_task(train.task),
                       seeded(cfg.global, derive_seed(cfg.seed, 0x91084a1)));
  return model;
}

// DR / DR-SF: the global model refined on all rows with pooled per-segment
// importance weights and the unweighted margin as base margin.
inline GlobalModel fit_dr(const Dataset& train, const Dataset& test_features, const MrConfig& cfg,
                          bool segment_onehot, std::vector<std::string>* warnings_out = nullptr) {
  cfg.validate(train.task);
  if (!train.has_labels()) throw ConfigError("DR needs labeled training rows");
  if (train.dims() != test_features.dims()) throw ConfigError("train and test feature widths differ");
  GlobalModel model = fit_global_gbt(train, cfg, segment_onehot);
  const Matrix input = segment_onehot ? with_segment_onehot(train.features, train.segment, train.n_segments())
                                      : train.features;
  const Matrix base_margin = predict_margin(model.base, input);

  const auto train_rows = train.rows_by_segment();
  std::vector<IndexList> test_rows(train_rows.size());
  for (Index j = 0; j < test_features.rows(); ++j) {
    const int s = test_features.segment[static_cast<std::size_t>(j)];
    if (s >= 0 && s < static_cast<int>(test_rows.size())) test_rows[static_cast<std::size_t>(s)].push_back(j);
  }
  std::vector<int> test_predicted;
  if (cfg.weight_method == WeightMethod::bbse) {
    const Matrix test_input = segment_onehot
                                  ? with_segment_onehot(test_features.features, test_features.segment, train.n_segments())
                                  : test_features.features;
    test_predicted = detail::argmax_rows(predict_margin(model.base, test_input));
  }
  const std::vector<int> train_predicted = detail::argmax_rows(base_margin);

  Vector weights = Vector::Ones(train.rows());
  std::vector<std::vector<std::string>> warnings(train_rows.size());
  parallel_for(train_rows.size(), cfg.threads, [&](std::size_t s) {
    const auto& rows = train_rows[s];
    if (rows.empty()) return;
    SegmentWeightInputs in;
    in.fit_x = take_rows(train.features, rows);
    in.eval_x = in.fit_x;
    in.eval_y = take(train.labels, rows);
    in.test_x = take_rows(test_features.features, test_rows[s]);
    if (cfg.weight_method == WeightMethod::bbse) {
      in.source_labels = detail::class_labels(in.eval_y);
      in.source_predicted = take(train_predicted, rows);
      in.test_predicted = take(test_predicted, test_rows[s]);
    }
    const auto& name = train.segment_names[s];
    const WeightVector w = estimate_segment_weights(cfg, train.task, in, derive_seed(cfg.seed, name_hash(name), 3),
                                                    name, warnings[s]);
    for (std::size_t i = 0; i < rows.size(); ++i) weights[rows[i]] = w.values[static_cast<Index>(i)];
  });
  if (warnings_out) {
    for (auto& w : warnings) warnings_out->insert(warnings_out->end(), w.begin(), w.end());
  }
  model.refiner = fit_gbt(input, train.labels, LossKind::for_task(train.task),
                          seeded(cfg.refine, derive_seed(cfg.seed, 0xd2)), &weights, &base_margin);
  return model;
}

// ---------------------------------------------------------------------------
// The full two-stage estimator

struct SegmentModel {
  int segment = -1;
  Stage1Model stage1;
  GbtModel stage2;
  WeightSummary weights;
  Index tune_rows = 0;
  double stage1_tune_loss = 0.0;
};

struct MrModel {
  TaskKind task = TaskKind::regression();
  LossKind loss = LossKind::squared();
  Index n_features = 0;
  std::vector<std::string> feature_names;
  std::vector<std::string> segment_names;
  BaseEnsemble ensemble;
  std::vector<std::optional<SegmentModel>> segments;  // indexed by segment id
  GlobalModel fallback;
  MrConfig config;
  SegmentDistanceMatrix distances;  // empty unless clusters were learned
  std::vector<std::string> warnings;

  const SegmentModel* segment_model(int s) const {
    if (s < 0 || s >= static_cast<int>(segments.size()) || !segments[static_cast<std::size_t>(s)]) return nullptr;
    return &*segments[static_cast<std::size_t>(s)];
  }
};

namespace detail {

// Restricts a dataset to the listed segment ids, renumbering them 0..k-1.
inline Dataset compact_segments(const Dataset& data, const std::vector<int>& keep) {
  std::vector<int> remap(static_cast<std::size_t>(data.n_segments()), -1);
  for (std::size_t i = 0; i < keep.size(); ++i) remap[static_cast<std::size_t>(keep[i])] = static_cast<int>(i);
  IndexList rows;
  for (Index i = 0; i < data.rows(); ++i) {
    if (remap[static_cast<std::size_t>(data.segment[static_cast<std::size_t>(i)])] >= 0) rows.push_back(i);
  }
  Dataset out = data.subset(rows);
  for (auto& s : out.segment) s = remap[static_cast<std::size_t>(s)];
  out.segment_names.clear();
  for (int s : keep) out.segment_names.push_back(data.segment_names[static_cast<std::size_t>(s)]);
  return out;
}

}  // namespace detail

// Resolves the configured cluster policy over the segments present in train.
inline ClusterAssignment resolve_clusters(const Dataset& train, const MrConfig& cfg, SegmentDistanceMatrix* distances_out) {
  const auto by_segment = train.rows_by_segment();
  std::vector<int> present;
  for (int s = 0; s < train.n_segments(); ++s) {
    if (!by_segment[static_cast<std::size_t>(s)].empty()) present.push_back(s);
  }
  ClusterAssignment out;
  out.n_segments = train.n_segments();
  if (cfg.clusters.kind == ClusterPolicy::Kind::explicit_clusters) {
    std::vector<int> covered(static_cast<std::size_t>(train.n_segments()), 0);
    for (const auto& set : cfg.clusters.sets) {
      std::vector<int> members;
      for (const auto& name : set) {
        const auto it = std::find(train.segment_names.begin(), train.segment_names.end(), name);
        if (it == train.segment_names.end()) throw ConfigError("cluster names unknown segment '" + name + "'");
        const int s = static_cast<int>(it - train.segment_names.begin());
        if (covered[static_cast<std::size_t>(s)]++) throw ConfigError("segment '" + name + "' appears in two clusters");
        if (!by_segment[static_cast<std::size_t>(s)].empty()) members.push_back(s);
      }
      std::sort(members.begin(), members.end());
      if (!members.empty()) out.clusters.push_back(std::move(members));
    }
    // Segments left out of every set form one extra cluster.
    std::vector<int> rest;
    for (int s : present) {
      if (!covered[static_cast<std::size_t>(s)]) rest.push_back(s);
    }
    if (!rest.empty()) out.clusters.push_back(std::move(rest));
    std::sort(out.clusters.begin(), out.clusters.end());
    return out;
  }
  const Dataset compact = detail::compact_segments(train, present);
  SegmentDistanceMatrix d = segment_distance_matrix(compact, cfg.kernel, cfg.max_per_segment,
                                                    derive_seed(cfg.seed, 0xc1a5), cfg.threads);
  int m = cfg.clusters.kind == ClusterPolicy::Kind::fixed ? cfg.clusters.m : choose_num_clusters(d);
  if (m > d.size()) m = d.size();
  const ClusterAssignment local = cluster_segments(d, m);
  for (const auto& c : local.clusters) {
    std::vector<int> members;
    for (int s : c) members.push_back(present[static_cast<std::size_t>(s)]);
    out.clusters.push_back(std::move(members));
  }
  if (distances_out) *distances_out = std::move(d);
  return out;
}

// Everything up to stage 2: split, clusters, base ensemble, weights and
// stage 1. Stage 2 is cheap to redo for several refinement configs.
struct MrPrepared {
  MrModel model;  // no stage-2 models and no fallback yet
  std::vector<Matrix> tune_x;
  std::vector<Vector> tune_y;
  std::vector<Matrix> stage1_margins;
  std::vector<Vector> weights;
};

inline MrPrepared prepare_mr(const Dataset& train, const Dataset& test_features, const MrConfig& cfg) {
  cfg.validate(train.task);
  if (!train.has_labels()) throw ConfigError("fit_mr needs labeled training rows");
  if (train.dims() != test_features.dims()) throw ConfigError("train and test feature widths differ");
  const int ns = train.n_segments();

  MrPrepared prep;
  MrModel& model = prep.model;
  model.task = train.task;
  model.loss = LossKind::for_task(train.task);
  model.n_features = train.dims();
  model.feature_names = train.feature_names;
  model.segment_names = train.segment_names;
  model.config = cfg;

  const SplitPlan plan = split_base_tune(train, cfg.varsigma, derive_seed(cfg.seed, 0x1));
  const Dataset base = train.subset(plan.base_indices);

  const ClusterAssignment clusters = resolve_clusters(train, cfg, &model.distances);
  model.ensemble = fit_base_ensemble(base, clusters, seeded(cfg.base, derive_seed(cfg.seed, 0x2)), cfg.threads);
  const auto n_models = static_cast<Index>(model.ensemble.size());

  std::vector<IndexList> tune_rows(static_cast<std::size_t>(ns)), train_rows = train.rows_by_segment();
  for (Index i : plan.tune_indices) tune_rows[static_cast<std::size_t>(train.segment[static_cast<std::size_t>(i)])].push_back(i);
  std::vector<IndexList> test_rows(static_cast<std::size_t>(ns));
  for (Index j = 0; j < test_features.rows(); ++j) {
    const int s = test_features.segment[static_cast<std::size_t>(j)];
    if (s >= 0 && s < ns) test_rows[static_cast<std::size_t>(s)].push_back(j);
  }

  Stage1Options s1;
  s1.ball = cfg.ball;
  s1.intercept = cfg.intercept;
  s1.lambda_min = cfg.lambda_min;
  s1.lambda_max = cfg.lambda_max;

  const auto nss = static_cast<std::size_t>(ns);
  model.segments.resize(nss);
  prep.tune_x.resize(nss);
  prep.tune_y.resize(nss);
  prep.stage1_margins.resize(nss);
  prep.weights.resize(nss);
  std::vector<std::vector<std::string>> warnings(nss);
  parallel_for(nss, cfg.threads, [&](std::size_t s) {
    const auto& rows = tune_rows[s];
    if (rows.empty()) return;
    const std::string& name = train.segment_names[s];
    auto& notes = warnings[s];
    const Matrix x = take_rows(train.features, rows);
    const Vector y = take(train.labels, rows);
    if (static_cast<Index>(rows.size()) < n_models + 1) {
      notes.push_back("segment '" + name + "' has " + std::to_string(rows.size()) + " tune rows for " +
                      std::to_string(n_models) + " base models; stage 1 relies on the ball constraint");
    }
    const std::vector<Matrix> margins = model.ensemble.margins(x);
    SegmentWeightInputs in;
    in.fit_x = take_rows(train.features, train_rows[s]);
    in.eval_x = x;
    in.eval_y = y;
    in.test_x = take_rows(test_features.features, test_rows[s]);
    if (cfg.weight_method == WeightMethod::bbse) {
      in.source_labels = detail::class_labels(y);
      in.source_predicted = detail::argmax_rows(margins.back());
      in.test_predicted = detail::argmax_rows(predict_margin(model.ensemble.models.back(), in.test_x));
    }
    const std::uint64_t segment_seed = derive_seed(cfg.seed, name_hash(name));
    const WeightVector weights = estimate_segment_weights(cfg, train.task, in, derive_seed(segment_seed, 3), name, notes);

    SegmentModel sm;
    sm.segment = static_cast<int>(s);
    sm.tune_rows = static_cast<Index>(rows.size());
    sm.stage1 = fit_stage1_margins(margins, y, model.loss, s1);
    sm.stage1.segment = static_cast<int>(s);
    if (sm.stage1.hit_lambda_max) notes.push_back("segment '" + name + "': stage-1 norm exceeds 1 even at lambda_max");
    Matrix delta = stage1_margin(sm.stage1, margins);
    sm.stage1_tune_loss = mean_loss(model.loss, y, delta);
    sm.weights = WeightSummary::of(weights);
    model.segments[s] = std::move(sm);
    prep.tune_x[s] = x;
    prep.tune_y[s] = y;
    prep.stage1_margins[s] = std::move(delta);
    prep.weights[s] = weights.values;
  });
  for (auto& w : warnings) model.warnings.insert(model.warnings.end(), w.begin(), w.end());
  return prep;
}

// Fits every segment's stage-2 refiner with the given config.
inline MrModel refine_mr(const MrPrepared& prep, const GbtConfig& refine) {
  MrModel model = prep.model;
  model.config.refine = refine;
  const std::uint64_t seed = model.config.seed;
  parallel_for(model.segments.size(), model.config.threads, [&](std::size_t s) {
    if (!model.segments[s]) return;
    const std::uint64_t segment_seed = derive_seed(seed, name_hash(model.segment_names[s]));
    model.segments[s]->stage2 = fit_gbt(prep.tune_x[s], prep.tune_y[s], model.loss,
                                        seeded(refine, derive_seed(segment_seed, 4)), &prep.weights[s],
                                        &prep.stage1_margins[s]);
  });
  return model;
}

inline MrModel fit_mr(const Dataset& train, const Dataset& test_features, const MrConfig& cfg) {
  MrModel model = refine_mr(prepare_mr(train, test_features, cfg), cfg.refine);
  model.fallback = fit_dr(train, test_features, cfg, false, &model.warnings);
  return model;
}

// Raw margins per row: the segment's stage-1 margin plus its stage-2
// correction, or the fallback for segments without a model.
inline Matrix predict_margin(const MrModel& model, const Matrix& x, const std::vector<int>& segments) {
  if (x.cols() != model.n_features) {
    throw ConfigError("feature width " + std::to_string(x.cols()) + " does not match model width " +
                      std::to_string(model.n_features));
  }
  if (static_cast<Index>(segments.size()) != x.rows()) throw ConfigError("segment ids misaligned with rows");
  const int width = model.loss.width();
  Matrix out(x.rows(), width);
  std::vector<IndexList> groups(model.segments.size());
  IndexList unknown;
  for (Index i = 0; i < x.rows(); ++i) {
    const int s = segments[static_cast<std::size_t>(i)];
    if (model.segment_model(s)) {
      groups[static_cast<std::size_t>(s)].push_back(i);
    } else {
      unknown.push_back(i);
    }
  }
  for (std::size_t s = 0; s < groups.size(); ++s) {
    if (groups[s].empty()) continue;
    const SegmentModel& sm = *model.segments[s];
    const Matrix xs = take_rows(x, groups[s]);
    const Matrix delta = stage1_margin(sm.stage1, model.ensemble.margins(xs));
    const Matrix margin = predict_margin(sm.stage2, xs, &delta);
    for (std::size_t i = 0; i < groups[s].size(); ++i) out.row(groups[s][i]) = margin.row(static_cast<Index>(i));
  }
  if (!unknown.empty()) {
    const Matrix xs = take_rows(x, unknown);
    std::vector<int> seg = take(segments, unknown);
    // Unknown segments get no one-hot column.
    for (auto& s : seg) {
      if (s >= model.fallback.n_segments) s = -1;
    }
    const Matrix margin = predict_margin(model.fallback, xs, seg);
    for (std::size_t i = 0; i < unknown.size(); ++i) out.row(unknown[i]) = margin.row(static_cast<Index>(i));
  }
  return out;
}

// Stage-1 margins only (no stage-2 correction); fallback rows use the
// fallback margin.
inline Matrix predict_stage1_margin(const MrModel& model, const Matrix& x, const std::vector<int>& segments) {
  Matrix out = predict_margin(model, x, segments);
  for (Index i = 0; i < x.rows(); ++i) {
    const SegmentModel* sm = model.segment_model(segments[static_cast<std::size_t>(i)]);
    if (!sm) continue;
    const Matrix row = x.row(i);
    out.row(i) = stage1_margin(sm->stage1, model.ensemble.margins(row)).row(0);
  }
  return out;
}

// Predictions in label space: values for regression, P(y = 1) for binary,
// probability rows for multiclass.
inline Matrix predict(const MrModel& model, const Matrix& x, const std::vector<int>& segments) {
  return apply_link(predict_margin(model, x, segments), model.loss);
}

inline Matrix predict(const GlobalModel& model, const Matrix& x, const std::vector<int>& segments) {
  return apply_link(predict_margin(model, x, segments), model.base.loss);
}

}  // namespace mrda
