// mrda: command-line front end for the multiply robust estimator.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
// data error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mrda/mrda.hpp"

namespace {

using namespace mrda;

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

// ---------------------------------------------------------------------------
// Config files: flat key=value lines, '#' comments. Keys are long flag
// names without the leading dashes.

std::vector<std::string> read_config_args(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::vector<std::string> args;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(number) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || key == "config") {
      throw ConfigError(path + ":" + std::to_string(number) + ": invalid key '" + key + "'");
    }
    args.push_back("--" + key);
    args.push_back(value);
  }
  return args;
}

// Places config-file arguments right after the subcommand so that flags
// given on the command line, which come later, take precedence.
std::vector<std::string> expand_config(const std::vector<std::string>& argv) {
  std::size_t sub = 0;
  for (std::size_t i = 1; i < argv.size(); ++i) {
    if (!argv[i].empty() && argv[i][0] != '-') {
      sub = i;
      break;
    }
  }
  if (sub == 0) return argv;
  std::string path;
  for (std::size_t i = sub + 1; i < argv.size(); ++i) {
    if (argv[i] == "--config" && i + 1 < argv.size()) path = argv[i + 1];
    if (argv[i].rfind("--config=", 0) == 0) path = argv[i].substr(9);
  }
  if (path.empty()) return argv;
  std::vector<std::string> out(argv.begin(), argv.begin() + static_cast<std::ptrdiff_t>(sub) + 1);
  const auto extra = read_config_args(path);
  out.insert(out.end(), extra.begin(), extra.end());
  out.insert(out.end(), argv.begin() + static_cast<std::ptrdiff_t>(sub) + 1, argv.end());
  return out;
}

// ---------------------------------------------------------------------------
// Flag groups

struct DataFlags {
  std::string label_col = "y";
  std::string segment_col = kSegmentColumn;
  std::string group_col;
  std::string task = "regression";
  int classes = 0;

  TaskKind task_kind() const {
    if (task == "binary" && classes != 0 && classes != 2) throw ConfigError("binary tasks have 2 classes");
    return parse_task(task, classes);
  }

  CsvOptions csv(bool labels_optional = false) const {
    CsvOptions o;
    o.label_col = label_col;
    o.segment_col = segment_col;
    if (!group_col.empty()) o.group_col = group_col;
    o.task = task_kind();
    o.labels_optional = labels_optional;
    return o;
  }
};

void add_data_flags(CLI::App* app, DataFlags& f) {
  app->add_option("--label-col", f.label_col, "Label column name")->capture_default_str();
  app->add_option("--segment-col", f.segment_col, "Segment column name")->capture_default_str();
  app->add_option("--group-col", f.group_col, "Optional group column; groups never straddle a split");
  app->add_option("--task", f.task, "regression, binary or multiclass")
      ->check(CLI::IsMember({"regression", "binary", "multiclass"}))
      ->capture_default_str();
  app->add_option("--classes", f.classes, "Number of classes for multiclass tasks");
}

void add_gbt_flags(CLI::App* app, const std::string& prefix, GbtConfig& c) {
  const std::string p = "--" + prefix + "-";
  app->add_option(p + "n-estimators", c.n_estimators, "Boosting rounds")->capture_default_str();
  app->add_option(p + "max-depth", c.max_depth, "Tree depth")->capture_default_str();
  app->add_option(p + "learning-rate", c.learning_rate, "Shrinkage")->capture_default_str();
  app->add_option(p + "subsample", c.subsample, "Row fraction per round")->capture_default_str();
  app->add_option(p + "colsample-bytree", c.colsample_bytree, "Column fraction per round")->capture_default_str();
  app->add_option(p + "min-child-weight", c.min_child_weight, "Minimum hessian per leaf")->capture_default_str();
  app->add_option(p + "leaf-l2", c.leaf_l2, "L2 penalty on leaf values")->capture_default_str();
  app->add_option(p + "n-bins", c.n_bins, "Histogram bins")->capture_default_str();
}

struct ModelFlags {
  std::string shift = "covariate";
  std::string weights = "discriminative";
  double eta = kDefaultEta;
  double varsigma = 0.8;
  std::string clusters = "auto";
  std::string cluster_file;
  bool ball = true;
  bool intercept = true;
  double lambda_max = 1e6;
  Index max_per_segment = 2000;
  double bandwidth = 0.0;
  double label_bandwidth = 0.0;
  GbtConfig base = GbtConfig::cluster_defaults();
  GbtConfig global = GbtConfig::library_defaults();
  GbtConfig refine = GbtConfig::refine_defaults();

  MrConfig config(std::uint64_t seed, unsigned threads) const {
    MrConfig c;
    c.shift = parse_shift(shift);
    c.weight_method = parse_weight_method(weights);
    c.eta = eta;
    c.varsigma = varsigma;
    c.ball = ball;
    c.intercept = intercept;
    c.lambda_max = lambda_max;
    c.max_per_segment = max_per_segment;
    if (bandwidth > 0.0) c.kernel.feature_bandwidth = bandwidth;
    if (label_bandwidth > 0.0) c.kernel.label_bandwidth = label_bandwidth;
    c.base = base;
    c.global = global;
    c.refine = refine;
    c.seed = seed;
    c.threads = threads;
    if (!cluster_file.empty()) {
      c.clusters.kind = ClusterPolicy::Kind::explicit_clusters;
      const Json j = read_json(cluster_file);
      detail::decode("cluster file", [&] {
        check_format_version(j, "cluster file");
        c.clusters.sets = j.at("clusters").get<std::vector<std::vector<std::string>>>();
        return 0;
      });
    } else if (clusters != "auto") {
      std::size_t used = 0;
      int m = 0;
      try {
        m = std::stoi(clusters, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != clusters.size() || m < 1) throw ConfigError("--clusters takes 'auto' or a positive count");
      c.clusters.kind = ClusterPolicy::Kind::fixed;
      c.clusters.m = m;
    }
    return c;
  }
};

void add_bool_option(CLI::App* app, const std::string& name, bool& value, const std::string& help) {
  app->add_option(name, value, help + " (true/false)")->capture_default_str();
}

void add_model_flags(CLI::App* app, ModelFlags& f) {
  app->add_option("--shift", f.shift, "covariate or label")
      ->check(CLI::IsMember({"covariate", "label"}))
      ->capture_default_str();
  app->add_option("--weights", f.weights, "discriminative, kmm, bbse or none")
      ->check(CLI::IsMember({"discriminative", "kmm", "bbse", "none"}))
      ->capture_default_str();
  app->add_option("--eta", f.eta, "Importance weight ceiling")->capture_default_str();
  app->add_option("--varsigma", f.varsigma, "Base-training fraction of each segment")->capture_default_str();
  app->add_option("--clusters", f.clusters, "auto or a cluster count")->capture_default_str();
  app->add_option("--cluster-file", f.cluster_file, "Cluster JSON from the cluster command");
  add_bool_option(app, "--ball", f.ball, "Restrict stage-1 coefficients to the unit ball");
  add_bool_option(app, "--intercept", f.intercept, "Fit an unpenalized stage-1 intercept");
  app->add_option("--lambda-max", f.lambda_max, "Upper end of the ridge search")->capture_default_str();
  app->add_option("--max-per-segment", f.max_per_segment, "Rows per segment used for distances")->capture_default_str();
  app->add_option("--bandwidth", f.bandwidth, "Gaussian feature bandwidth (default: median heuristic)");
  app->add_option("--label-bandwidth", f.label_bandwidth, "Gaussian label bandwidth for regression");
  add_gbt_flags(app, "base", f.base);
  add_gbt_flags(app, "global", f.global);
  add_gbt_flags(app, "refine", f.refine);
}

// ---------------------------------------------------------------------------
// Helpers

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

Dataset load_train(const std::string& path, const DataFlags& f) {
  Dataset d = load_csv(path, f.csv());
  print_warnings(d.warnings);
  return d;
}

Dataset load_against(const std::string& path, const DataFlags& f, const Dataset& reference, bool labels_optional) {
  Dataset d = load_csv(path, f.csv(labels_optional), &reference);
  print_warnings(d.warnings);
  return d;
}

// Renumbers segments to those present, keeping their relative order.
struct PresentSegments {
  std::vector<int> ids;
  std::vector<std::string> names;
};

PresentSegments present_segments(const std::vector<int>& segment, const std::vector<std::string>& names) {
  std::vector<int> remap(names.size(), -1);
  for (int s : segment) remap[static_cast<std::size_t>(s)] = 0;
  PresentSegments out;
  for (std::size_t s = 0; s < names.size(); ++s) {
    if (remap[s] < 0) continue;
    remap[s] = static_cast<int>(out.names.size());
    out.names.push_back(names[s]);
  }
  for (int s : segment) out.ids.push_back(remap[static_cast<std::size_t>(s)]);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

std::vector<std::string> prediction_columns(const TaskKind& task) {
  if (task.type() == TaskType::regression) return {"prediction"};
  if (task.type() == TaskType::binary) return {"p1"};
  std::vector<std::string> out;
  for (int k = 0; k < task.classes(); ++k) out.push_back("p" + std::to_string(k));
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct Common {
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string config;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Master seed")->capture_default_str();
  app->add_option("--threads", c.threads, "Worker threads (0: all cores)")->capture_default_str();
  app->add_option("--config", c.config, "Flat key=value file supplying any flag");
}

struct SimulateArgs {
  Common common;
  SyntheticConfig cfg;
  std::vector<double> gamma;
  std::string out_dir = ".";
};

int run_simulate(const SimulateArgs& a) {
  SyntheticConfig cfg = a.cfg;
  cfg.seed = a.common.seed;
  if (a.gamma.size() == 1) {
    cfg.gamma.assign(static_cast<std::size_t>(std::max(cfg.n_segments, 0)), a.gamma.front());
  } else {
    cfg.gamma = a.gamma;
  }
  const TrainTest tt = simulate_local_covshift(cfg);
  std::error_code ec;
  std::filesystem::create_directories(a.out_dir, ec);
  const auto dir = std::filesystem::path(a.out_dir);
  write_csv((dir / "train.csv").string(), tt.train);
  write_csv((dir / "test.csv").string(), tt.test);
  std::cout << "wrote " << tt.train.rows() << " train rows and " << tt.test.rows() << " test rows to " << a.out_dir
            << "\n";
  return 0;
}

struct ClusterArgs {
  Common common;
  DataFlags data;
  std::string train;
  std::string m = "auto";
  int min_cluster_size = 2;
  Index max_per_segment = 2000;
  double bandwidth = 0.0;
  double label_bandwidth = 0.0;
  std::string out = "clusters.json";
};

int run_cluster(const ClusterArgs& a) {
  const Dataset train = load_train(a.train, a.data);
  KernelSpec kernel;
  if (a.bandwidth > 0.0) kernel.feature_bandwidth = a.bandwidth;
  if (a.label_bandwidth > 0.0) kernel.label_bandwidth = a.label_bandwidth;
  const SegmentDistanceMatrix d =
      segment_distance_matrix(train, kernel, a.max_per_segment, derive_seed(a.common.seed, 0xc1a5), a.common.threads);
  int m = 0;
  if (a.m == "auto") {
    m = choose_num_clusters(d, a.min_cluster_size);
  } else {
    try {
      m = std::stoi(a.m);
    } catch (const std::exception&) {
      throw ConfigError("--m takes 'auto' or a cluster count");
    }
  }
  const ClusterAssignment assignment = cluster_segments(d, m);
  Json out{{"format_version", kFormatVersion},
           {"m", assignment.m()},
           {"segment_names", d.segment_names},
           {"clusters", clusters_json(assignment, d.segment_names)},
           {"distance_matrix", detail::matrix_json(d.values)}};
  write_json(a.out, out);
  std::cout << "clustered " << d.size() << " segments into " << assignment.m() << " clusters\n";
  return 0;
}

struct FitArgs {
  Common common;
  DataFlags data;
  ModelFlags model;
  std::string train, test;
  std::string method = "mr";
  std::string out = "model.json";
  std::string report = "fit_report.json";
};

Json fit_report(const ModelBundle& bundle, const MrModel* mr, const std::vector<std::string>& warnings) {
  Json report{{"format_version", kFormatVersion},
              {"method", bundle.method},
              {"task", to_json(bundle.task)},
              {"input_width", bundle.input_width()}};
  if (mr) {
    report["clusters"] = clusters_json(mr->ensemble.clusters, mr->segment_names);
    report["distance_matrix"] = mr->distances.values.size() > 0 ? detail::matrix_json(mr->distances.values) : Json(nullptr);
    Json segments = Json::array();
    for (const auto& entry : mr->segments) {
      if (!entry) continue;
      segments.push_back(Json{{"segment", mr->segment_names[static_cast<std::size_t>(entry->segment)]},
                              {"beta", detail::vector_json(entry->stage1.beta)},
                              {"beta_norm", entry->stage1.beta.norm()},
                              {"intercept", detail::vector_json(entry->stage1.intercept)},
                              {"lambda", entry->stage1.lambda},
                              {"tune_rows", entry->tune_rows},
                              {"stage1_tune_loss", entry->stage1_tune_loss},
                              {"weights", to_json(entry->weights)}});
    }
    report["segments"] = std::move(segments);
  }
  report["warnings"] = warnings;
  return report;
}

int run_fit(const FitArgs& a) {
  const auto& methods = model_methods();
  if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) {
    throw ConfigError("unknown method '" + a.method + "' (valid: mr, dr, dr-sf, xgb)");
  }
  const MrConfig cfg = a.model.config(a.common.seed, a.common.threads);
  const Dataset train = load_train(a.train, a.data);
  cfg.validate(train.task);
  const Dataset test = load_against(a.test, a.data, train, true);

  ModelBundle bundle;
  bundle.method = a.method;
  bundle.task = train.task;
  bundle.schema = train.schema;
  bundle.feature_names = train.feature_names;
  bundle.segment_names = train.segment_names;
  bundle.label_col = a.data.label_col;
  bundle.segment_col = a.data.segment_col;
  std::vector<std::string> warnings;
  if (a.method == "mr") {
    bundle.mr = fit_mr(train, test, cfg);
    warnings = bundle.mr->warnings;
  } else if (a.method == "xgb") {
    bundle.global = fit_global_gbt(train, cfg);
  } else {
    bundle.global = fit_dr(train, test, cfg, a.method == "dr-sf", &warnings);
  }
  print_warnings(warnings);
  write_json(a.out, to_json(bundle));
  write_json(a.report, fit_report(bundle, bundle.mr ? &*bundle.mr : nullptr, warnings));
  std::cout << "fitted " << a.method << " on " << train.rows() << " rows, " << train.n_segments()
            << " segments; model written to " << a.out << "\n";
  return 0;
}

ModelBundle load_model(const std::string& path) { return bundle_from_json(read_json(path)); }

DataFlags bundle_data_flags(const ModelBundle& b) {
  DataFlags f;
  f.label_col = b.label_col;
  f.segment_col = b.segment_col;
  f.task = b.task.name();
  f.classes = b.task.classes();
  return f;
}

struct PredictArgs {
  Common common;
  std::string model, data;
  std::string out = "predictions.csv";
};

int run_predict(const PredictArgs& a) {
  const ModelBundle bundle = load_model(a.model);
  const Dataset reference = bundle.reference();
  const Dataset data = load_against(a.data, bundle_data_flags(bundle), reference, true);
  const Matrix pred = bundle.predict(data.features, data.segment);
  std::ostringstream out;
  std::vector<std::string> header{kSegmentColumn};
  const auto cols = prediction_columns(bundle.task);
  header.insert(header.end(), cols.begin(), cols.end());
  csv::write_record(out, header);
  for (Index i = 0; i < pred.rows(); ++i) {
    std::vector<std::string> fields{data.segment_names[static_cast<std::size_t>(data.segment[static_cast<std::size_t>(i)])]};
    for (Index k = 0; k < pred.cols(); ++k) fields.push_back(csv::format_double(pred(i, k)));
    csv::write_record(out, fields);
  }
  write_text(a.out, out.str());
  std::cout << "wrote " << pred.rows() << " predictions to " << a.out << "\n";
  return 0;
}

struct EvaluateArgs {
  Common common;
  std::string model, test, baseline;
  std::string metric;
  std::string out = "report.json";
};

int run_evaluate(const EvaluateArgs& a) {
  const ModelBundle bundle = load_model(a.model);
  const Dataset data = load_against(a.test, bundle_data_flags(bundle), bundle.reference(), false);
  const MetricKind kind = a.metric.empty() ? default_metric(bundle.task) : parse_metric(a.metric);
  const Matrix pred = bundle.predict(data.features, data.segment);
  std::optional<Matrix> base_pred;
  std::string baseline_method;
  if (!a.baseline.empty()) {
    const ModelBundle baseline = load_model(a.baseline);
    if (baseline.task != bundle.task) throw ConfigError("baseline model has a different task");
    if (baseline.schema.encoded_names() != bundle.schema.encoded_names()) {
      throw ConfigError("baseline model was trained on a different feature schema");
    }
    // Segment ids follow the main model's vocabulary; map them by name.
    std::vector<int> seg(data.segment.size(), -1);
    for (std::size_t i = 0; i < seg.size(); ++i) {
      const auto& name = data.segment_names[static_cast<std::size_t>(data.segment[i])];
      const auto it = std::find(baseline.segment_names.begin(), baseline.segment_names.end(), name);
      seg[i] = it == baseline.segment_names.end() ? static_cast<int>(baseline.segment_names.size())
                                                  : static_cast<int>(it - baseline.segment_names.begin());
    }
    base_pred = baseline.predict(data.features, seg);
    baseline_method = baseline.method;
  }
  const PresentSegments present = present_segments(data.segment, data.segment_names);
  const SegmentReport report = per_segment_report(data.labels, pred, present.ids, present.names,
                                                  base_pred ? &*base_pred : nullptr, kind, bundle.task);
  Json j{{"format_version", kFormatVersion}, {"method", bundle.method}};
  j["baseline_method"] = baseline_method.empty() ? Json(nullptr) : Json(baseline_method);
  j.update(to_json(report));
  write_json(a.out, j);
  std::cout << format_report(report);
  return 0;
}

struct CvArgs {
  Common common;
  DataFlags data;
  ModelFlags model;
  std::string train, test;
  int folds = 5;
  std::string out = "cv.json";
  CvGrid grid;
};

template <class T>
void add_grid_option(CLI::App* app, const std::string& name, std::vector<T>& values, const std::string& help) {
  app->add_option("--grid-" + name, values, help)->delimiter(',')->capture_default_str();
}

int run_cv(const CvArgs& a) {
  const MrConfig cfg = a.model.config(a.common.seed, a.common.threads);
  const Dataset train = load_train(a.train, a.data);
  cfg.validate(train.task);
  const Dataset test = load_against(a.test, a.data, train, true);
  const CvResult result = cross_validate(train, test, a.grid, a.folds, cfg);
  print_warnings(result.warnings);
  write_json(a.out, to_json(result));
  const auto& best = result.best;
  std::cout << "best of " << result.scores.size() << " grid points: base(n_estimators=" << best.base.n_estimators
            << ", max_depth=" << best.base.max_depth << ", subsample=" << best.base.subsample
            << ", colsample_bytree=" << best.base.colsample_bytree << ") refine(n_estimators="
            << best.refine.n_estimators << ", max_depth=" << best.refine.max_depth
            << ", learning_rate=" << best.refine.learning_rate << ", subsample=" << best.refine.subsample
            << ", colsample_bytree=" << best.refine.colsample_bytree << ") mean " << to_string(result.kind) << " "
            << result.best_score().mean_loss << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiply robust domain adaptation for segmented tabular data"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Write a synthetic train/test pair with local covariate shift");
  add_common(simulate, sim.common);
  simulate->add_option("--segments", sim.cfg.n_segments, "Number of segments")->capture_default_str();
  simulate->add_option("--n-train", sim.cfg.n_train, "Training rows")->capture_default_str();
  simulate->add_option("--n-test", sim.cfg.n_test, "Test rows")->capture_default_str();
  simulate->add_option("--noise-sd", sim.cfg.noise_sd, "Label noise standard deviation")->capture_default_str();
  simulate->add_option("--gamma", sim.gamma, "Interaction weight: one value, or one per segment")->delimiter(',');
  simulate->add_option("--out-dir", sim.out_dir, "Directory for train.csv and test.csv")->capture_default_str();

  ClusterArgs cl;
  auto* cluster = app.add_subcommand("cluster", "Cluster segments by MMD distance");
  add_common(cluster, cl.common);
  add_data_flags(cluster, cl.data);
  cluster->add_option("--train", cl.train, "Training CSV")->required();
  cluster->add_option("--m", cl.m, "auto or a cluster count")->capture_default_str();
  cluster->add_option("--min-cluster-size", cl.min_cluster_size, "Smallest cluster allowed by auto")->capture_default_str();
  cluster->add_option("--max-per-segment", cl.max_per_segment, "Rows per segment used for distances")
      ->capture_default_str();
  cluster->add_option("--bandwidth", cl.bandwidth, "Gaussian feature bandwidth (default: median heuristic)");
  cluster->add_option("--label-bandwidth", cl.label_bandwidth, "Gaussian label bandwidth for regression");
  cluster->add_option("--out", cl.out, "Output JSON")->capture_default_str();

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit a model (mr, dr, dr-sf or xgb)");
  add_common(fit, fa.common);
  add_data_flags(fit, fa.data);
  add_model_flags(fit, fa.model);
  fit->add_option("--train", fa.train, "Labeled training CSV")->required();
  fit->add_option("--test", fa.test, "Test CSV; only features and segments are used")->required();
  fit->add_option("--method", fa.method, "mr, dr, dr-sf or xgb")->capture_default_str();
  fit->add_option("--out", fa.out, "Model JSON")->capture_default_str();
  fit->add_option("--report", fa.report, "Fit report JSON")->capture_default_str();

  PredictArgs pa;
  auto* predict_cmd = app.add_subcommand("predict", "Write predictions for a CSV");
  add_common(predict_cmd, pa.common);
  predict_cmd->add_option("--model", pa.model, "Model JSON")->required();
  predict_cmd->add_option("--data", pa.data, "CSV to score")->required();
  predict_cmd->add_option("--out", pa.out, "Predictions CSV")->capture_default_str();

  EvaluateArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "Per-segment metrics on a labeled CSV");
  add_common(evaluate, ea.common);
  evaluate->add_option("--model", ea.model, "Model JSON")->required();
  evaluate->add_option("--test", ea.test, "Labeled test CSV")->required();
  evaluate->add_option("--baseline", ea.baseline, "Baseline model JSON for relative values");
  evaluate->add_option("--metric", ea.metric, "mse, ce or brier (default: mse or ce by task)");
  evaluate->add_option("--out", ea.out, "Report JSON")->capture_default_str();

  CvArgs ca;
  auto* cv = app.add_subcommand("cv", "Grid search by k-fold cross-validation with weighted validation folds");
  add_common(cv, ca.common);
  add_data_flags(cv, ca.data);
  add_model_flags(cv, ca.model);
  cv->add_option("--train", ca.train, "Labeled training CSV")->required();
  cv->add_option("--test", ca.test, "Test CSV; only features and segments are used")->required();
  cv->add_option("--folds", ca.folds, "Number of folds")->capture_default_str();
  cv->add_option("--out", ca.out, "CV result JSON")->capture_default_str();
  add_grid_option(cv, "base-n-estimators", ca.grid.base_n_estimators, "Base rounds");
  add_grid_option(cv, "base-max-depth", ca.grid.base_max_depth, "Base depths");
  add_grid_option(cv, "base-subsample", ca.grid.base_subsample, "Base row fractions");
  add_grid_option(cv, "base-colsample-bytree", ca.grid.base_colsample_bytree, "Base column fractions");
  add_grid_option(cv, "base-learning-rate", ca.grid.base_learning_rate, "Base learning rates");
  add_grid_option(cv, "refine-n-estimators", ca.grid.refine_n_estimators, "Refinement rounds");
  add_grid_option(cv, "refine-max-depth", ca.grid.refine_max_depth, "Refinement depths");
  add_grid_option(cv, "refine-learning-rate", ca.grid.refine_learning_rate, "Refinement learning rates");
  add_grid_option(cv, "refine-subsample", ca.grid.refine_subsample, "Refinement row fractions");
  add_grid_option(cv, "refine-colsample-bytree", ca.grid.refine_colsample_bytree, "Refinement column fractions");

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = expand_config(args);
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*simulate) return run_simulate(sim);
    if (*cluster) return run_cluster(cl);
    if (*fit) return run_fit(fa);
    if (*predict_cmd) return run_predict(pa);
    if (*evaluate) return run_evaluate(ea);
    if (*cv) return run_cv(ca);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
