#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrda/data.hpp"
#include "mrda/evalcv.hpp"
#include "mrda/gbt.hpp"
#include "mrda/linear.hpp"
#include "mrda/mr.hpp"

namespace mrda {

using Json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;

namespace detail {

inline Json vector_json(const Vector& v) {
  Json out = Json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Vector vector_from(const Json& j) {
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Index>(i)] = j[i].get<double>();
  return v;
}

inline Json matrix_json(const Matrix& m) {
  Json out = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(std::move(row));
  }
  return out;
}

inline Matrix matrix_from(const Json& j) {
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows > 0 ? static_cast<Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const Json& row = j[static_cast<std::size_t>(i)];
    if (static_cast<Index>(row.size()) != cols) throw DataError("ragged matrix in json");
    for (Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

// Runs a decoder and turns json access errors into DataError.
template <class F>
auto decode(const char* what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed ") + what + ": " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Small value types

inline Json to_json(const TaskKind& t) { return Json{{"type", t.name()}, {"classes", t.classes()}}; }

inline TaskKind task_from_json(const Json& j) {
  return parse_task(j.at("type").get<std::string>(), j.at("classes").get<int>());
}

inline Json to_json(const LossKind& l) { return Json{{"type", l.name()}, {"classes", l.classes()}}; }

inline LossKind loss_from_json(const Json& j) {
  return parse_loss(j.at("type").get<std::string>(), j.at("classes").get<int>());
}

inline Json to_json(const GbtConfig& c) {
  return Json{{"n_estimators", c.n_estimators},
              {"max_depth", c.max_depth},
              {"learning_rate", c.learning_rate},
              {"subsample", c.subsample},
              {"colsample_bytree", c.colsample_bytree},
              {"min_child_weight", c.min_child_weight},
              {"leaf_l2", c.leaf_l2},
              {"n_bins", c.n_bins},
              {"seed", c.seed}};
}

inline GbtConfig gbt_config_from_json(const Json& j) {
  GbtConfig c;
  c.n_estimators = j.at("n_estimators").get<int>();
  c.max_depth = j.at("max_depth").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.subsample = j.at("subsample").get<double>();
  c.colsample_bytree = j.at("colsample_bytree").get<double>();
  c.min_child_weight = j.at("min_child_weight").get<double>();
  c.leaf_l2 = j.at("leaf_l2").get<double>();
  c.n_bins = j.at("n_bins").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline Json to_json(const FeatureSchema& schema) {
  Json out = Json::array();
  for (const auto& c : schema.columns) {
    Json col{{"name", c.name}, {"categorical", c.categorical}};
    if (c.categorical) col["levels"] = c.levels;
    out.push_back(std::move(col));
  }
  return out;
}

inline FeatureSchema schema_from_json(const Json& j) {
  FeatureSchema schema;
  for (const auto& col : j) {
    FeatureSchema::Column c;
    c.name = col.at("name").get<std::string>();
    c.categorical = col.at("categorical").get<bool>();
    if (c.categorical) c.levels = col.at("levels").get<std::vector<std::string>>();
    schema.columns.push_back(std::move(c));
  }
  return schema;
}

// ---------------------------------------------------------------------------
// Learners

inline Json to_json(const Tree& tree) {
  Json nodes = Json::array();
  for (const auto& n : tree.nodes) {
    nodes.push_back(Json{{"feature", n.feature},
                         {"threshold", n.threshold},
                         {"left", n.left},
                         {"right", n.right},
                         {"leaf_value", n.leaf_value}});
  }
  return nodes;
}

inline Tree tree_from_json(const Json& j, Index n_features) {
  Tree tree;
  for (const auto& n : j) {
    TreeNode node;
    node.feature = n.at("feature").get<int>();
    node.threshold = n.at("threshold").get<double>();
    node.left = n.at("left").get<int>();
    node.right = n.at("right").get<int>();
    node.leaf_value = n.at("leaf_value").get<double>();
    tree.nodes.push_back(node);
  }
  const int count = static_cast<int>(tree.nodes.size());
  if (count == 0) throw DataError("tree without nodes");
  for (int i = 0; i < count; ++i) {
    const auto& n = tree.nodes[static_cast<std::size_t>(i)];
    if (n.feature < 0) continue;
    if (n.feature >= n_features || n.left <= i || n.right <= i || n.left >= count || n.right >= count) {
      throw DataError("tree node " + std::to_string(i) + " has invalid links");
    }
  }
  return tree;
}

inline Json to_json(const GbtModel& m) {
  Json rounds = Json::array();
  for (const auto& round : m.rounds) {
    Json trees = Json::array();
    for (const auto& t : round) trees.push_back(to_json(t));
    rounds.push_back(std::move(trees));
  }
  return Json{{"loss", to_json(m.loss)},
              {"learning_rate", m.learning_rate},
              {"n_features", m.n_features},
              {"initial_margin", detail::vector_json(m.initial_margin)},
              {"uses_base_margin", m.uses_base_margin},
              {"rounds", std::move(rounds)}};
}

inline GbtModel gbt_from_json(const Json& j) {
  GbtModel m;
  m.loss = loss_from_json(j.at("loss"));
  m.learning_rate = j.at("learning_rate").get<double>();
  m.n_features = j.at("n_features").get<Index>();
  m.initial_margin = detail::vector_from(j.at("initial_margin"));
  if (m.initial_margin.size() != m.width()) throw DataError("initial_margin width does not match the loss");
  m.uses_base_margin = j.at("uses_base_margin").get<bool>();
  for (const auto& round : j.at("rounds")) {
    std::vector<Tree> trees;
    for (const auto& t : round) trees.push_back(tree_from_json(t, m.n_features));
    if (static_cast<int>(trees.size()) != m.width()) throw DataError("boosting round has the wrong number of trees");
    m.rounds.push_back(std::move(trees));
  }
  return m;
}

inline Json to_json(const LinearModel& m) {
  return Json{{"loss", to_json(m.loss)},
              {"l2", m.l2},
              {"coefficients", detail::matrix_json(m.coefficients)},
              {"intercept", detail::vector_json(m.intercept)}};
}

inline LinearModel linear_from_json(const Json& j) {
  LinearModel m;
  m.loss = loss_from_json(j.at("loss"));
  m.l2 = j.at("l2").get<double>();
  m.coefficients = detail::matrix_from(j.at("coefficients"));
  m.intercept = detail::vector_from(j.at("intercept"));
  return m;
}

// ---------------------------------------------------------------------------
// Estimators

inline Json to_json(const MrConfig& c) {
  Json clusters{{"policy", c.clusters.kind == ClusterPolicy::Kind::automatic ? "auto"
                           : c.clusters.kind == ClusterPolicy::Kind::fixed   ? "fixed"
                                                                             : "explicit"}};
  if (c.clusters.kind == ClusterPolicy::Kind::fixed) clusters["m"] = c.clusters.m;
  if (c.clusters.kind == ClusterPolicy::Kind::explicit_clusters) clusters["sets"] = c.clusters.sets;
  Json kernel = Json::object();
  kernel["feature_bandwidth"] = c.kernel.feature_bandwidth ? Json(*c.kernel.feature_bandwidth) : Json("median");
  kernel["label_bandwidth"] = c.kernel.label_bandwidth ? Json(*c.kernel.label_bandwidth) : Json("median");
  return Json{{"shift", to_string(c.shift)},
              {"weight_method", to_string(c.weight_method)},
              {"eta", c.eta},
              {"varsigma", c.varsigma},
              {"clusters", std::move(clusters)},
              {"kernel", std::move(kernel)},
              {"max_per_segment", c.max_per_segment},
              {"base", to_json(c.base)},
              {"global", to_json(c.global)},
              {"refine", to_json(c.refine)},
              {"ball", c.ball},
              {"intercept", c.intercept},
              {"lambda_min", c.lambda_min},
              {"lambda_max", c.lambda_max},
              {"seed", c.seed}};
}

inline MrConfig mr_config_from_json(const Json& j) {
  MrConfig c;
  c.shift = parse_shift(j.at("shift").get<std::string>());
  c.weight_method = parse_weight_method(j.at("weight_method").get<std::string>());
  c.eta = j.at("eta").get<double>();
  c.varsigma = j.at("varsigma").get<double>();
  const Json& clusters = j.at("clusters");
  const auto policy = clusters.at("policy").get<std::string>();
  if (policy == "fixed") {
    c.clusters.kind = ClusterPolicy::Kind::fixed;
    c.clusters.m = clusters.at("m").get<int>();
  } else if (policy == "explicit") {
    c.clusters.kind = ClusterPolicy::Kind::explicit_clusters;
    c.clusters.sets = clusters.at("sets").get<std::vector<std::vector<std::string>>>();
  } else if (policy != "auto") {
    throw DataError("unknown cluster policy '" + policy + "'");
  }
  const Json& kernel = j.at("kernel");
  if (kernel.at("feature_bandwidth").is_number()) c.kernel.feature_bandwidth = kernel.at("feature_bandwidth").get<double>();
  if (kernel.at("label_bandwidth").is_number()) c.kernel.label_bandwidth = kernel.at("label_bandwidth").get<double>();
  c.max_per_segment = j.at("max_per_segment").get<Index>();
  c.base = gbt_config_from_json(j.at("base"));
  c.global = gbt_config_from_json(j.at("global"));
  c.refine = gbt_config_from_json(j.at("refine"));
  c.ball = j.at("ball").get<bool>();
  c.intercept = j.at("intercept").get<bool>();
  c.lambda_min = j.at("lambda_min").get<double>();
  c.lambda_max = j.at("lambda_max").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline Json to_json(const WeightSummary& w) {
  return Json{{"method", to_string(w.method)}, {"n", w.n},     {"min", w.min},
              {"mean", w.mean},                {"max", w.max}, {"eta", w.eta},
              {"normalization_factor", w.normalization_factor}};
}

inline WeightSummary weight_summary_from_json(const Json& j) {
  WeightSummary w;
  w.method = parse_weight_method(j.at("method").get<std::string>());
  w.n = j.at("n").get<Index>();
  w.min = j.at("min").get<double>();
  w.mean = j.at("mean").get<double>();
  w.max = j.at("max").get<double>();
  w.eta = j.at("eta").get<double>();
  w.normalization_factor = j.at("normalization_factor").get<double>();
  return w;
}

inline Json to_json(const GlobalModel& m) {
  Json out{{"segment_onehot", m.segment_onehot},
           {"n_segments", m.n_segments},
           {"n_features", m.n_features},
           {"input_width", m.input_width()},
           {"base", to_json(m.base)}};
  out["refiner"] = m.refiner ? to_json(*m.refiner) : Json(nullptr);
  return out;
}

inline GlobalModel global_from_json(const Json& j) {
  GlobalModel m;
  m.segment_onehot = j.at("segment_onehot").get<bool>();
  m.n_segments = j.at("n_segments").get<int>();
  m.n_features = j.at("n_features").get<Index>();
  m.base = gbt_from_json(j.at("base"));
  if (!j.at("refiner").is_null()) m.refiner = gbt_from_json(j.at("refiner"));
  if (m.base.n_features != m.input_width()) throw DataError("global model input width is inconsistent");
  return m;
}

inline Json clusters_json(const ClusterAssignment& c, const std::vector<std::string>& names) {
  Json out = Json::array();
  for (const auto& cluster : c.clusters) {
    Json members = Json::array();
    for (int s : cluster) members.push_back(names[static_cast<std::size_t>(s)]);
    out.push_back(std::move(members));
  }
  return out;
}

inline Json to_json(const MrModel& m) {
  Json ensemble = Json::array();
  for (const auto& model : m.ensemble.models) ensemble.push_back(to_json(model));
  Json segments = Json::array();
  for (const auto& entry : m.segments) {
    if (!entry) continue;
    const SegmentModel& sm = *entry;
    segments.push_back(Json{{"segment", m.segment_names[static_cast<std::size_t>(sm.segment)]},
                            {"beta", detail::vector_json(sm.stage1.beta)},
                            {"intercept", detail::vector_json(sm.stage1.intercept)},
                            {"lambda", sm.stage1.lambda},
                            {"hit_lambda_max", sm.stage1.hit_lambda_max},
                            {"tune_rows", sm.tune_rows},
                            {"stage1_tune_loss", sm.stage1_tune_loss},
                            {"weights", to_json(sm.weights)},
                            {"stage2", to_json(sm.stage2)}});
  }
  return Json{{"task", to_json(m.task)},
              {"n_features", m.n_features},
              {"feature_names", m.feature_names},
              {"segment_names", m.segment_names},
              {"config", to_json(m.config)},
              {"clusters", clusters_json(m.ensemble.clusters, m.segment_names)},
              {"ensemble", std::move(ensemble)},
              {"segments", std::move(segments)},
              {"fallback", to_json(m.fallback)}};
}

inline MrModel mr_from_json(const Json& j) {
  MrModel m;
  m.task = task_from_json(j.at("task"));
  m.loss = LossKind::for_task(m.task);
  m.n_features = j.at("n_features").get<Index>();
  m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  m.segment_names = j.at("segment_names").get<std::vector<std::string>>();
  m.config = mr_config_from_json(j.at("config"));
  m.ensemble.loss = m.loss;
  m.ensemble.clusters.n_segments = static_cast<int>(m.segment_names.size());
  const auto index_of = [&](const std::string& name) {
    const auto it = std::find(m.segment_names.begin(), m.segment_names.end(), name);
    if (it == m.segment_names.end()) throw DataError("unknown segment '" + name + "' in model");
    return static_cast<int>(it - m.segment_names.begin());
  };
  for (const auto& cluster : j.at("clusters")) {
    std::vector<int> members;
    for (const auto& name : cluster) members.push_back(index_of(name.get<std::string>()));
    m.ensemble.clusters.clusters.push_back(std::move(members));
  }
  for (const auto& model : j.at("ensemble")) {
    m.ensemble.models.push_back(gbt_from_json(model));
    if (m.ensemble.models.back().n_features != m.n_features) throw DataError("base model width mismatch");
  }
  if (m.ensemble.models.size() != m.ensemble.clusters.clusters.size() + 1) {
    throw DataError("ensemble needs one model per cluster plus the all-segments model");
  }
  m.segments.resize(m.segment_names.size());
  for (const auto& sj : j.at("segments")) {
    SegmentModel sm;
    sm.segment = index_of(sj.at("segment").get<std::string>());
    sm.stage1.segment = sm.segment;
    sm.stage1.beta = detail::vector_from(sj.at("beta"));
    sm.stage1.intercept = detail::vector_from(sj.at("intercept"));
    sm.stage1.lambda = sj.at("lambda").get<double>();
    sm.stage1.hit_lambda_max = sj.at("hit_lambda_max").get<bool>();
    sm.tune_rows = sj.at("tune_rows").get<Index>();
    sm.stage1_tune_loss = sj.at("stage1_tune_loss").get<double>();
    sm.weights = weight_summary_from_json(sj.at("weights"));
    sm.stage2 = gbt_from_json(sj.at("stage2"));
    if (sm.stage1.beta.size() != static_cast<Index>(m.ensemble.size())) throw DataError("beta length mismatch");
    if (sm.stage1.intercept.size() != m.loss.width()) throw DataError("intercept width mismatch");
    m.segments[static_cast<std::size_t>(sm.segment)] = std::move(sm);
  }
  m.fallback = global_from_json(j.at("fallback"));
  return m;
}

// ---------------------------------------------------------------------------
// Model files

// What `fit` writes: one estimator plus the encoding needed to read new
// CSV files the same way as the training file.
struct ModelBundle {
  std::string method;  // mr, dr, dr-sf, xgb
  TaskKind task = TaskKind::regression();
  FeatureSchema schema;
  std::vector<std::string> feature_names;
  std::vector<std::string> segment_names;
  std::string label_col = "y";
  std::string segment_col = kSegmentColumn;
  std::optional<MrModel> mr;
  std::optional<GlobalModel> global;

  Index input_width() const {
    if (mr) return mr->n_features;
    return global ? global->input_width() : 0;
  }

  // Empty dataset carrying the schema and segment vocabulary, for load_csv.
  Dataset reference() const {
    Dataset d;
    d.task = task;
    d.schema = schema;
    d.feature_names = feature_names;
    d.segment_names = segment_names;
    return d;
  }

  Matrix predict_margin(const Matrix& x, const std::vector<int>& segments) const {
    if (mr) return mrda::predict_margin(*mr, x, segments);
    if (!global) throw ConfigError("model bundle is empty");
    std::vector<int> seg = segments;
    for (auto& s : seg) {
      if (s >= global->n_segments) s = -1;
    }
    return mrda::predict_margin(*global, x, seg);
  }

  Matrix predict(const Matrix& x, const std::vector<int>& segments) const {
    return apply_link(predict_margin(x, segments), LossKind::for_task(task));
  }
};

inline const std::vector<std::string>& model_methods() {
  static const std::vector<std::string> methods{"mr", "dr", "dr-sf", "xgb"};
  return methods;
}

inline Json to_json(const ModelBundle& b) {
  Json out{{"format_version", kFormatVersion},
           {"method", b.method},
           {"task", to_json(b.task)},
           {"label_col", b.label_col},
           {"segment_col", b.segment_col},
           {"schema", to_json(b.schema)},
           {"feature_names", b.feature_names},
           {"segment_names", b.segment_names},
           {"input_width", b.input_width()}};
  out["model"] = b.mr ? to_json(*b.mr) : to_json(*b.global);
  return out;
}

inline void check_format_version(const Json& j, const char* what) {
  if (!j.is_object() || !j.contains("format_version")) {
    throw DataError(std::string(what) + " lacks format_version");
  }
  if (j.at("format_version") != kFormatVersion) {
    throw DataError(std::string(what) + " has unsupported format_version " + j.at("format_version").dump());
  }
}

inline ModelBundle bundle_from_json(const Json& j) {
  return detail::decode("model file", [&] {
    check_format_version(j, "model file");
    ModelBundle b;
    b.method = j.at("method").get<std::string>();
    const auto& methods = model_methods();
    if (std::find(methods.begin(), methods.end(), b.method) == methods.end()) {
      throw DataError("unknown model method '" + b.method + "'");
    }
    b.task = task_from_json(j.at("task"));
    b.label_col = j.at("label_col").get<std::string>();
    b.segment_col = j.at("segment_col").get<std::string>();
    b.schema = schema_from_json(j.at("schema"));
    b.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    b.segment_names = j.at("segment_names").get<std::vector<std::string>>();
    if (b.schema.encoded_names() != b.feature_names) throw DataError("schema does not match feature_names");
    if (b.method == "mr") {
      b.mr = mr_from_json(j.at("model"));
    } else {
      b.global = global_from_json(j.at("model"));
    }
    if (b.input_width() != j.at("input_width").get<Index>()) throw DataError("input_width does not match the model");
    return b;
  });
}

// Throws DataError describing the first problem; returns on success.
inline void validate_model_json(const Json& j) { (void)bundle_from_json(j); }

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

inline void write_json(const std::string& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << dump(j);
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

inline Json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DataError("'" + path + "' is not valid json: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Reports

inline Json to_json(const MetricValue& m) {
  return Json{{"value", m.value}, {"se", m.se}, {"n", m.n}, {"n_eff", m.n_eff}};
}

inline Json to_json(const SegmentReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json j{{"segment", row.segment}};
    j.update(to_json(row.value));
    if (row.baseline) {
      j["baseline_value"] = row.baseline->value;
      j["baseline_se"] = row.baseline->se;
      j["relative"] = *row.relative;
    }
    rows.push_back(std::move(j));
  }
  return Json{{"metric", to_string(r.kind)}, {"rows", std::move(rows)}};
}

inline Json to_json(const GbtParams& p) {
  return Json{{"n_estimators", p.n_estimators},
              {"max_depth", p.max_depth},
              {"learning_rate", p.learning_rate},
              {"subsample", p.subsample},
              {"colsample_bytree", p.colsample_bytree}};
}

inline Json to_json(const GridPoint& p) { return Json{{"base", to_json(p.base)}, {"refine", to_json(p.refine)}}; }

inline Json to_json(const CvResult& r) {
  Json scores = Json::array();
  for (const auto& s : r.scores) {
    Json j{{"point", to_json(s.point)}, {"folds_ok", s.folds_ok}};
    j["mean_loss"] = s.folds_ok > 0 ? Json(s.mean_loss) : Json(nullptr);
    scores.push_back(std::move(j));
  }
  Json folds = Json::array();
  for (const auto& rep : r.best_score().fold_reports) folds.push_back(to_json(rep));
  return Json{{"format_version", kFormatVersion},
              {"metric", to_string(r.kind)},
              {"best", to_json(r.best)},
              {"best_mean_loss", r.best_score().mean_loss},
              {"best_fold_reports", std::move(folds)},
              {"scores", std::move(scores)},
              {"warnings", r.warnings}};
}

}  // namespace mrda
