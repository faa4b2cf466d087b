#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "mrda/csv.hpp"
#include "mrda/random.hpp"
#include "mrda/types.hpp"

namespace mrda {

inline constexpr const char* kSegmentColumn = "__segment__";
inline constexpr const char* kGroupColumn = "__group__";

// How raw CSV feature columns map onto encoded feature columns. A schema
// learned from a training file is reused for test files so both share
// one encoding and one segment vocabulary.
struct FeatureSchema {
  struct Column {
    std::string name;
    bool categorical = false;
    std::vector<std::string> levels;  // lexicographic; one-hot columns in this order
  };
  std::vector<Column> columns;

  std::vector<std::string> encoded_names() const {
    std::vector<std::string> out;
    for (const auto& c : columns) {
      if (!c.categorical) {
        out.push_back(c.name);
      } else {
        for (const auto& level : c.levels) out.push_back(c.name + "=" + level);
      }
    }
    return out;
  }
};

// Inverse of the one-hot naming: source column -> category set.
inline std::map<std::string, std::set<std::string>> decode_onehot_names(
    const std::vector<std::string>& encoded) {
  std::map<std::string, std::set<std::string>> out;
  for (const auto& name : encoded) {
    const auto eq = name.find('=');
    if (eq == std::string::npos) continue;
    out[name.substr(0, eq)].insert(name.substr(eq + 1));
  }
  return out;
}

struct Dataset {
  Matrix features;
  Vector labels;  // empty when the file carried no label column
  std::vector<int> segment;
  std::optional<std::vector<std::string>> group;
  std::vector<std::string> feature_names;
  TaskKind task = TaskKind::regression();
  std::vector<std::string> segment_names;  // id -> original segment string
  FeatureSchema schema;
  std::vector<std::string> warnings;

  Index rows() const { return features.rows(); }
  Index dims() const { return features.cols(); }
  int n_segments() const { return static_cast<int>(segment_names.size()); }
  bool has_labels() const { return labels.size() == features.rows(); }

  Dataset subset(const IndexList& rows) const {
    Dataset out;
    out.features = take_rows(features, rows);
    if (has_labels()) out.labels = take(labels, rows);
    out.segment = take(segment, rows);
    if (group) out.group = take(*group, rows);
    out.feature_names = feature_names;
    out.task = task;
    out.segment_names = segment_names;
    out.schema = schema;
    return out;
  }

  // Row indices of every segment id, in row order.
  std::vector<IndexList> rows_by_segment() const {
    std::vector<IndexList> out(static_cast<std::size_t>(n_segments()));
    for (Index i = 0; i < rows(); ++i) {
      const int s = segment[static_cast<std::size_t>(i)];
      if (s >= 0 && s < n_segments()) out[static_cast<std::size_t>(s)].push_back(i);
    }
    return out;
  }

  // Class label of row i; only meaningful for classification tasks.
  int label_class(Index i) const { return static_cast<int>(labels[i]); }

  void validate() const {
    const Index n = rows();
    if (n < 1) throw DataError("dataset has no rows");
    if (static_cast<Index>(segment.size()) != n) throw DataError("segment ids misaligned with rows");
    if (labels.size() != 0 && labels.size() != n) throw DataError("labels misaligned with rows");
    if (group && static_cast<Index>(group->size()) != n) throw DataError("group ids misaligned with rows");
    if (static_cast<Index>(feature_names.size()) != dims()) throw DataError("feature names misaligned with columns");
    if (!features.allFinite()) throw DataError("features contain non-finite values");
    if (has_labels() && !labels.allFinite()) throw DataError("labels contain non-finite values");
    for (int s : segment) {
      if (s < 0 || s >= n_segments()) throw DataError("segment id " + std::to_string(s) + " out of range");
    }
    if (task.is_classification() && has_labels()) {
      for (Index i = 0; i < n; ++i) {
        const double y = labels[i];
        if (y != std::floor(y) || y < 0 || y >= task.classes()) {
          throw DataError("row " + std::to_string(i) + ": label " + std::to_string(y) + " is not a class index below " +
                          std::to_string(task.classes()));
        }
      }
    }
  }
};

struct CsvOptions {
  std::string label_col = "y";
  std::string segment_col = kSegmentColumn;
  std::optional<std::string> group_col;
  TaskKind task = TaskKind::regression();
  // When true a missing label column yields a dataset without labels.
  bool labels_optional = false;
};

namespace detail {

inline std::optional<double> parse_number(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  const char* begin = cell.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin) return std::nullopt;
  while (*end == ' ' || *end == '\t') ++end;
  if (*end != '\0') return std::nullopt;
  return v;
}

inline std::size_t find_column(const std::vector<std::string>& header, const std::string& name) {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? header.size() : static_cast<std::size_t>(it - header.begin());
}

inline std::string cell_ref(std::size_t data_row, const std::string& column) {
  // Data rows are reported 1-based, counting the header as line 1.
  return "row " + std::to_string(data_row + 2) + ", column '" + column + "'";
}

}  // namespace detail

// Builds a Dataset from a parsed table. `reference` supplies the feature
// encoding and segment vocabulary learned from another file.
inline Dataset from_table(const csv::Table& table, const CsvOptions& opt, const Dataset* reference = nullptr) {
  const auto& header = table.header;
  if (table.rows.empty()) throw DataError("csv has a header but no data rows");

  const std::size_t seg_col = detail::find_column(header, opt.segment_col);
  if (seg_col == header.size()) throw ConfigError("missing segment column '" + opt.segment_col + "'");
  std::size_t label_col = detail::find_column(header, opt.label_col);
  if (label_col == header.size() && !opt.labels_optional) {
    throw ConfigError("missing label column '" + opt.label_col + "'");
  }
  std::size_t group_col = header.size();
  if (opt.group_col) {
    group_col = detail::find_column(header, *opt.group_col);
    if (group_col == header.size()) throw ConfigError("missing group column '" + *opt.group_col + "'");
  }

  Dataset data;
  data.task = opt.task;
  const std::size_t n = table.rows.size();

  // Resolve feature columns: every column other than label/segment/group.
  std::vector<std::size_t> source_index;
  if (reference) {
    data.schema = reference->schema;
    for (const auto& col : data.schema.columns) {
      const std::size_t j = detail::find_column(header, col.name);
      if (j == header.size()) throw ConfigError("missing feature column '" + col.name + "'");
      source_index.push_back(j);
    }
  } else {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (j == seg_col || j == label_col || j == group_col) continue;
      if (header[j] == kGroupColumn) continue;
      FeatureSchema::Column col;
      col.name = header[j];
      col.categorical = !detail::parse_number(table.rows.front()[j]).has_value();
      if (col.categorical) {
        std::set<std::string> levels;
        for (const auto& row : table.rows) levels.insert(row[j]);
        col.levels.assign(levels.begin(), levels.end());
      }
      data.schema.columns.push_back(std::move(col));
      source_index.push_back(j);
    }
  }
  data.feature_names = data.schema.encoded_names();
  data.features.resize(static_cast<Index>(n), static_cast<Index>(data.feature_names.size()));
  data.features.setZero();

  std::size_t unseen_levels = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = table.rows[i];
    Index out = 0;
    for (std::size_t c = 0; c < data.schema.columns.size(); ++c) {
      const auto& col = data.schema.columns[c];
      const std::string& cell = row[source_index[c]];
      if (!col.categorical) {
        const auto v = detail::parse_number(cell);
        if (!v) throw DataError("unparseable number '" + cell + "' at " + detail::cell_ref(i, col.name));
        if (!std::isfinite(*v)) throw DataError("non-finite value '" + cell + "' at " + detail::cell_ref(i, col.name));
        data.features(static_cast<Index>(i), out++) = *v;
      } else {
        const auto it = std::lower_bound(col.levels.begin(), col.levels.end(), cell);
        if (it != col.levels.end() && *it == cell) {
          data.features(static_cast<Index>(i), out + (it - col.levels.begin())) = 1.0;
        } else {
          ++unseen_levels;
        }
        out += static_cast<Index>(col.levels.size());
      }
    }
  }
  if (unseen_levels > 0) {
    data.warnings.push_back(std::to_string(unseen_levels) +
                            " categorical cells had levels unseen in the reference schema; encoded as all-zero");
  }

  if (label_col != header.size()) {
    data.labels.resize(static_cast<Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = detail::parse_number(table.rows[i][label_col]);
      if (!v) throw DataError("unparseable label '" + table.rows[i][label_col] + "' at " + detail::cell_ref(i, opt.label_col));
      if (!std::isfinite(*v)) throw DataError("non-finite label at " + detail::cell_ref(i, opt.label_col));
      if (opt.task.is_classification() && (*v != std::floor(*v) || *v < 0 || *v >= opt.task.classes())) {
        throw DataError("label '" + table.rows[i][label_col] + "' at " + detail::cell_ref(i, opt.label_col) +
                        " is not a class index below " + std::to_string(opt.task.classes()));
      }
      data.labels[static_cast<Index>(i)] = *v;
    }
  }

  // Segment vocabulary: reference order first, then first appearance.
  std::unordered_map<std::string, int> vocab;
  if (reference) {
    data.segment_names = reference->segment_names;
    for (std::size_t s = 0; s < data.segment_names.size(); ++s) vocab.emplace(data.segment_names[s], static_cast<int>(s));
  }
  data.segment.resize(n);
  std::size_t unseen_segments = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& name = table.rows[i][seg_col];
    auto [it, inserted] = vocab.emplace(name, static_cast<int>(data.segment_names.size()));
    if (inserted) {
      data.segment_names.push_back(name);
      if (reference) ++unseen_segments;
    }
    data.segment[i] = it->second;
  }
  if (unseen_segments > 0) {
    data.warnings.push_back(std::to_string(unseen_segments) + " segment values do not occur in the reference data");
  }

  if (group_col != header.size()) {
    std::vector<std::string> groups(n);
    for (std::size_t i = 0; i < n; ++i) groups[i] = table.rows[i][group_col];
    data.group = std::move(groups);
  }
  data.validate();
  return data;
}

inline Dataset load_csv(const std::string& path, const CsvOptions& opt, const Dataset* reference = nullptr) {
  return from_table(csv::read_file(path), opt, reference);
}

inline Dataset load_csv(const std::string& path, const std::string& label_col, const std::string& segment_col,
                        const std::optional<std::string>& group_col, TaskKind task) {
  CsvOptions opt;
  opt.label_col = label_col;
  opt.segment_col = segment_col;
  opt.group_col = group_col;
  opt.task = task;
  return load_csv(path, opt);
}

// Writes encoded features, the label column (if any) and the original
// segment strings under `__segment__`.
inline void write_csv(std::ostream& out, const Dataset& data, const std::string& label_col = "y") {
  std::vector<std::string> fields = data.feature_names;
  if (data.has_labels()) fields.push_back(label_col);
  fields.push_back(kSegmentColumn);
  if (data.group) fields.push_back(kGroupColumn);
  csv::write_record(out, fields);
  for (Index i = 0; i < data.rows(); ++i) {
    fields.clear();
    for (Index j = 0; j < data.dims(); ++j) fields.push_back(csv::format_double(data.features(i, j)));
    if (data.has_labels()) fields.push_back(csv::format_double(data.labels[i]));
    fields.push_back(data.segment_names[static_cast<std::size_t>(data.segment[static_cast<std::size_t>(i)])]);
    if (data.group) fields.push_back((*data.group)[static_cast<std::size_t>(i)]);
    csv::write_record(out, fields);
  }
}

inline void write_csv(const std::string& path, const Dataset& data, const std::string& label_col = "y") {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  write_csv(out, data, label_col);
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Splits

struct SplitPlan {
  IndexList base_indices;
  IndexList tune_indices;
  double varsigma = 0.8;
};

namespace detail {

// Distributes round(total_fraction * sum) units across buckets so each gets
// floor(fraction * size) or one more (largest remainder, ties to lower index).
inline std::vector<Index> apportion(const std::vector<Index>& sizes, double fraction,
                                     const std::vector<std::string>* tie_names = nullptr) {
  std::vector<Index> out(sizes.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  Index total = 0;
  Index assigned = 0;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    const double exact = fraction * static_cast<double>(sizes[s]);
    out[s] = static_cast<Index>(std::floor(exact));
    assigned += out[s];
    total += sizes[s];
    remainders.emplace_back(exact - std::floor(exact), s);
  }
  const auto target = static_cast<Index>(std::llround(fraction * static_cast<double>(total)));
  std::stable_sort(remainders.begin(), remainders.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return tie_names && (*tie_names)[a.second] < (*tie_names)[b.second];
  });
  for (std::size_t k = 0; assigned < target && k < remainders.size(); ++k) {
    ++out[remainders[k].second];
    ++assigned;
  }
  return out;
}

// Distinct groups in first-appearance order with their member rows.
inline std::vector<IndexList> group_members(const std::vector<std::string>& group) {
  std::unordered_map<std::string, std::size_t> id;
  std::vector<IndexList> members;
  for (std::size_t i = 0; i < group.size(); ++i) {
    auto [it, inserted] = id.emplace(group[i], members.size());
    if (inserted) members.emplace_back();
    members[it->second].push_back(static_cast<Index>(i));
  }
  return members;
}

}  // namespace detail

// Stratified base/tune split. Without groups every segment contributes
// floor or ceil of varsigma * n_s rows to the base side (at least one row
// to each side). With groups whole groups move together.
inline SplitPlan split_base_tune(const Dataset& data, double varsigma, std::uint64_t seed) {
  if (!(varsigma > 0.0 && varsigma < 1.0)) throw ConfigError("varsigma must lie in (0, 1)");
  const auto by_segment = data.rows_by_segment();
  for (std::size_t s = 0; s < by_segment.size(); ++s) {
    if (by_segment[s].size() == 1) {
      throw DataError("segment '" + data.segment_names[s] + "' has a single row and cannot be split");
    }
  }
  SplitPlan plan;
  plan.varsigma = varsigma;
  CounterRng rng(derive_seed(seed, 0x5b117));

  if (!data.group) {
    std::vector<Index> sizes;
    for (const auto& rows : by_segment) sizes.push_back(static_cast<Index>(rows.size()));
    auto base_counts = detail::apportion(sizes, varsigma, &data.segment_names);
    for (std::size_t s = 0; s < by_segment.size(); ++s) {
      if (sizes[s] == 0) continue;
      base_counts[s] = std::clamp<Index>(base_counts[s], 1, sizes[s] - 1);
      IndexList rows = by_segment[s];
      CounterRng segment_rng(derive_seed(seed, 0x5b117, name_hash(data.segment_names[s])));
      segment_rng.shuffle(rows);
      plan.base_indices.insert(plan.base_indices.end(), rows.begin(), rows.begin() + base_counts[s]);
      plan.tune_indices.insert(plan.tune_indices.end(), rows.begin() + base_counts[s], rows.end());
    }
  } else {
    auto members = detail::group_members(*data.group);
    std::vector<std::size_t> order(members.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const std::size_t n_seg = by_segment.size();
    std::vector<double> target(n_seg);
    for (std::size_t s = 0; s < n_seg; ++s) target[s] = varsigma * static_cast<double>(by_segment[s].size());
    std::vector<double> base_count(n_seg, 0.0);
    for (std::size_t g : order) {
      std::map<int, double> counts;
      for (Index r : members[g]) counts[data.segment[static_cast<std::size_t>(r)]] += 1.0;
      // Put the group on the side that keeps every segment closer to its target.
      double to_base = 0.0, to_tune = 0.0;
      for (const auto& [s, c] : counts) {
        const auto u = static_cast<std::size_t>(s);
        const double need = target[u] - base_count[u];
        to_base += std::pow(need - c, 2);
        to_tune += std::pow(need, 2);
      }
      const bool base = to_base <= to_tune;
      if (base) {
        for (const auto& [s, c] : counts) base_count[static_cast<std::size_t>(s)] += c;
      }
      auto& side = base ? plan.base_indices : plan.tune_indices;
      side.insert(side.end(), members[g].begin(), members[g].end());
    }
  }
  std::sort(plan.base_indices.begin(), plan.base_indices.end());
  std::sort(plan.tune_indices.begin(), plan.tune_indices.end());
  return plan;
}

struct Fold {
  IndexList train_indices;
  IndexList valid_indices;
};

// K folds, stratified by segment; group-aware when group ids exist.
inline std::vector<Fold> kfold_plan(const Dataset& data, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2, got " + std::to_string(k));
  const auto by_segment = data.rows_by_segment();
  for (std::size_t s = 0; s < by_segment.size(); ++s) {
    if (!by_segment[s].empty() && static_cast<int>(by_segment[s].size()) < k) {
      throw DataError("segment '" + data.segment_names[s] + "' has " + std::to_string(by_segment[s].size()) +
                      " rows, fewer than k=" + std::to_string(k));
    }
  }
  const auto uk = static_cast<std::size_t>(k);
  std::vector<std::size_t> fold_of(static_cast<std::size_t>(data.rows()));
  CounterRng rng(derive_seed(seed, 0xf01d));

  if (!data.group) {
    std::size_t offset = 0;
    for (const auto& segment_rows : by_segment) {
      IndexList rows = segment_rows;
      rng.shuffle(rows);
      for (std::size_t i = 0; i < rows.size(); ++i) fold_of[static_cast<std::size_t>(rows[i])] = (offset + i) % uk;
      offset = (offset + rows.size()) % uk;
    }
  } else {
    auto members = detail::group_members(*data.group);
    std::vector<std::size_t> order(members.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return members[a].size() > members[b].size(); });
    std::vector<std::size_t> load(uk, 0);
    for (std::size_t g : order) {
      const auto f = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
      load[f] += members[g].size();
      for (Index r : members[g]) fold_of[static_cast<std::size_t>(r)] = f;
    }
  }

  std::vector<Fold> folds(uk);
  for (Index i = 0; i < data.rows(); ++i) {
    const std::size_t f = fold_of[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < uk; ++j) {
      (j == f ? folds[j].valid_indices : folds[j].train_indices).push_back(i);
    }
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Synthetic local covariate shift

struct SyntheticConfig {
  int n_segments = 20;
  std::vector<double> gamma;  // per-segment interaction weight; empty means 1.0 everywhere
  double noise_sd = 0.3;
  Index n_train = 1000;
  Index n_test = 1000;
  std::uint64_t seed = 0;

  double gamma_of(int s) const { return gamma.empty() ? 1.0 : gamma[static_cast<std::size_t>(s)]; }

  void validate() const {
    if (n_segments < 1) throw ConfigError("n_segments must be >= 1");
    if (!(noise_sd >= 0.0)) throw ConfigError("noise_sd must be >= 0");
    if (n_train < 1 || n_test < 1) throw ConfigError("n_train and n_test must be >= 1");
    if (!gamma.empty() && static_cast<int>(gamma.size()) != n_segments) {
      throw ConfigError("gamma needs one value per segment");
    }
  }
};

// Segment intercepts evenly spaced over [-2, 2].
inline double synthetic_intercept(int segment, int n_segments) {
  if (n_segments == 1) return -2.0;
  return -2.0 + 4.0 * static_cast<double>(segment) / static_cast<double>(n_segments - 1);
}

struct TrainTest {
  Dataset train;
  Dataset test;
};

// y = a0 + a1'x + gamma * x2 * (1 + sin(3 x1)) + eps with a1 = -a0 * 1.
// Train covariates ~ N(0, I), test covariates ~ N(1, 0.3^2 I); rows are
// dealt to segments round-robin.
inline TrainTest simulate_local_covshift(const SyntheticConfig& cfg) {
  cfg.validate();
  constexpr int d = 4;
  std::vector<std::string> names;
  for (int s = 0; s < cfg.n_segments; ++s) names.push_back("s" + std::to_string(s + 1));

  auto generate = [&](Index n, double mean, double sd, std::uint64_t stream) {
    Dataset data;
    data.task = TaskKind::regression();
    data.feature_names = {"x1", "x2", "x3", "x4"};
    for (const auto& f : data.feature_names) data.schema.columns.push_back({f, false, {}});
    data.segment_names = names;
    data.features.resize(n, d);
    data.labels.resize(n);
    data.segment.resize(static_cast<std::size_t>(n));
    CounterRng rng(derive_seed(cfg.seed, stream));
    for (Index i = 0; i < n; ++i) {
      const int s = static_cast<int>(i % cfg.n_segments);
      data.segment[static_cast<std::size_t>(i)] = s;
      for (int j = 0; j < d; ++j) data.features(i, j) = rng.normal(mean, sd);
      const double eps = rng.normal(0.0, 1.0) * cfg.noise_sd;
      const double a0 = synthetic_intercept(s, cfg.n_segments);
      const auto x = data.features.row(i);
      double linear = 0.0;
      for (int j = 0; j < d; ++j) linear += -a0 * x(j);
      data.labels[i] = a0 + linear + cfg.gamma_of(s) * x(1) * (1.0 + std::sin(3.0 * x(0))) + eps;
    }
    return data;
  };
  return {generate(cfg.n_train, 0.0, 1.0, 1), generate(cfg.n_test, 1.0, 0.3, 2)};
}

// ---------------------------------------------------------------------------
// Constructed shifts

struct CovariateShiftSpec {
  Index feature = 0;
  double threshold = 0.0;
  double p_above = 0.8;
  double p_below = 0.2;
};

struct BinaryLabelShiftSpec {
  double test_frac = 0.2;
  double positive_keep = 0.5;
};

struct MulticlassLabelShiftSpec {
  double test_frac = 0.2;
  std::vector<double> target_rates;
};

using ShiftConstructionConfig = std::variant<CovariateShiftSpec, BinaryLabelShiftSpec, MulticlassLabelShiftSpec>;

namespace detail {

inline void check_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0, 1]");
}

// Exact random test_frac split of all rows.
inline std::pair<IndexList, IndexList> random_holdout(Index n, double test_frac, CounterRng& rng) {
  IndexList rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  rng.shuffle(rows);
  const auto n_test = static_cast<std::size_t>(std::llround(test_frac * static_cast<double>(n)));
  IndexList test(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
  IndexList train(rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {train, test};
}

}  // namespace detail

inline TrainTest construct_shift(const Dataset& data, const ShiftConstructionConfig& cfg, std::uint64_t seed) {
  CounterRng rng(derive_seed(seed, 0x5417));
  IndexList train_rows, test_rows;

  if (const auto* cov = std::get_if<CovariateShiftSpec>(&cfg)) {
    detail::check_probability(cov->p_above, "p_above");
    detail::check_probability(cov->p_below, "p_below");
    if (cov->feature < 0 || cov->feature >= data.dims()) throw ConfigError("shift feature index out of range");
    for (Index i = 0; i < data.rows(); ++i) {
      const double p = data.features(i, cov->feature) > cov->threshold ? cov->p_above : cov->p_below;
      (rng.bernoulli(p) ? test_rows : train_rows).push_back(i);
    }
  } else if (const auto* bin = std::get_if<BinaryLabelShiftSpec>(&cfg)) {
    detail::check_probability(bin->test_frac, "test_frac");
    detail::check_probability(bin->positive_keep, "positive_keep");
    if (data.task.type() != TaskType::binary) throw ConfigError("binary label shift requires a binary task");
    IndexList holdout;
    std::tie(train_rows, holdout) = detail::random_holdout(data.rows(), bin->test_frac, rng);
    for (Index i : holdout) {
      if (data.labels[i] == 1.0 && !rng.bernoulli(bin->positive_keep)) continue;
      test_rows.push_back(i);
    }
  } else {
    const auto& multi = std::get<MulticlassLabelShiftSpec>(cfg);
    detail::check_probability(multi.test_frac, "test_frac");
    if (data.task.type() != TaskType::multiclass) throw ConfigError("multiclass label shift requires a multiclass task");
    const int k = data.task.classes();
    if (static_cast<int>(multi.target_rates.size()) != k) throw ConfigError("target_rates needs one rate per class");
    double total = 0.0;
    for (double r : multi.target_rates) {
      detail::check_probability(r, "target rate");
      total += r;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError("target_rates must sum to 1");
    IndexList holdout;
    std::tie(train_rows, holdout) = detail::random_holdout(data.rows(), multi.test_frac, rng);
    std::vector<IndexList> by_class(static_cast<std::size_t>(k));
    for (Index i : holdout) by_class[static_cast<std::size_t>(data.label_class(i))].push_back(i);
    std::vector<Index> counts(static_cast<std::size_t>(k));
    // Exact per-class counts summing to the holdout size.
    {
      std::vector<std::pair<double, std::size_t>> rem;
      Index assigned = 0;
      const auto n_test = static_cast<double>(holdout.size());
      for (std::size_t c = 0; c < counts.size(); ++c) {
        const double exact = multi.target_rates[c] * n_test;
        counts[c] = static_cast<Index>(std::floor(exact));
        assigned += counts[c];
        rem.emplace_back(exact - std::floor(exact), c);
      }
      std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      for (std::size_t j = 0; assigned < static_cast<Index>(holdout.size()) && j < rem.size(); ++j, ++assigned) {
        ++counts[rem[j].second];
      }
    }
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] == 0) continue;
      if (by_class[c].empty()) throw DataError("class " + std::to_string(c) + " is empty in the test fold");
      for (Index j = 0; j < counts[c]; ++j) test_rows.push_back(by_class[c][rng.below(by_class[c].size())]);
    }
  }
  return {data.subset(train_rows), data.subset(test_rows)};
}

}  // namespace mrda
