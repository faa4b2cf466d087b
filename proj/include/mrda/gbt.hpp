#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "mrda/losses.hpp"
#include "mrda/random.hpp"
#include "mrda/types.hpp"

namespace mrda {

struct GbtConfig {
  int n_estimators = 100;
  int max_depth = 6;
  double learning_rate = 0.3;
  double subsample = 1.0;
  double colsample_bytree = 1.0;
  double min_child_weight = 1.0;
  double leaf_l2 = 1.0;
  int n_bins = 256;
  std::uint64_t seed = 0;

  // Stock settings of the usual boosting library; used for global models.
  static GbtConfig library_defaults() { return {}; }

  // Models trained on clusters of segments.
  static GbtConfig cluster_defaults() {
    GbtConfig cfg;
    cfg.colsample_bytree = 1.0;
    cfg.learning_rate = 0.1;
    cfg.max_depth = 3;
    cfg.n_estimators = 200;
    cfg.subsample = 0.8;
    return cfg;
  }

  // Per-segment refinement on top of a base margin.
  static GbtConfig refine_defaults() {
    GbtConfig cfg;
    cfg.max_depth = 2;
    cfg.n_estimators = 25;
    return cfg;
  }

  void validate() const {
    if (n_estimators < 0) throw ConfigError("n_estimators must be >= 0");
    if (max_depth < 0) throw ConfigError("max_depth must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(subsample > 0.0 && subsample <= 1.0)) throw ConfigError("subsample must lie in (0, 1]");
    if (!(colsample_bytree > 0.0 && colsample_bytree <= 1.0)) throw ConfigError("colsample_bytree must lie in (0, 1]");
    if (!(min_child_weight >= 0.0)) throw ConfigError("min_child_weight must be >= 0");
    if (!(leaf_l2 >= 0.0)) throw ConfigError("leaf_l2 must be >= 0");
    if (n_bins < 2 || n_bins > 65535) throw ConfigError("n_bins must lie in [2, 65535]");
  }
};

// Flat node array; node 0 is the root. Leaves have feature == -1.
// Rows with x[feature] <= threshold go left.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double leaf_value = 0.0;
};

struct Tree {
  std::vector<TreeNode> nodes;

  double predict(const double* row) const {
    int at = 0;
    while (nodes[static_cast<std::size_t>(at)].feature >= 0) {
      const auto& node = nodes[static_cast<std::size_t>(at)];
      at = row[node.feature] <= node.threshold ? node.left : node.right;
    }
    return nodes[static_cast<std::size_t>(at)].leaf_value;
  }

  int depth() const {
    std::vector<int> level(nodes.size(), 0);
    int deepest = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      deepest = std::max(deepest, level[i]);
      if (nodes[i].feature >= 0) {
        level[static_cast<std::size_t>(nodes[i].left)] = level[i] + 1;
        level[static_cast<std::size_t>(nodes[i].right)] = level[i] + 1;
      }
    }
    return deepest;
  }
};

// Additive trees over an initial margin. Leaf values already include the
// learning rate. When trained with a base margin, initial_margin is zero
// and the caller supplies the base margin again at prediction time.
struct GbtModel {
  LossKind loss = LossKind::squared();
  double learning_rate = 0.3;
  Index n_features = 0;
  Vector initial_margin;  // width()
  bool uses_base_margin = false;
  std::vector<std::vector<Tree>> rounds;  // rounds[r][k], k < width()

  int width() const { return loss.width(); }
  std::size_t n_trees() const {
    std::size_t total = 0;
    for (const auto& r : rounds) total += r.size();
    return total;
  }
};

// Optional training diagnostics.
struct GbtTrace {
  std::vector<double> train_loss;  // weighted mean loss before round 0 and after each round
};

namespace detail {

// Per-feature split candidates: bin(x) = #cuts < x, so "bin <= j" is
// "x <= cuts[j]".
inline std::vector<std::vector<double>> quantile_cuts(const Matrix& x, int n_bins) {
  std::vector<std::vector<double>> cuts(static_cast<std::size_t>(x.cols()));
  std::vector<double> values(static_cast<std::size_t>(x.rows()));
  for (Index f = 0; f < x.cols(); ++f) {
    for (Index i = 0; i < x.rows(); ++i) values[static_cast<std::size_t>(i)] = x(i, f);
    std::sort(values.begin(), values.end());
    std::vector<double> unique = values;
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
    auto& c = cuts[static_cast<std::size_t>(f)];
    if (unique.size() <= 1) continue;
    if (static_cast<int>(unique.size()) <= n_bins) {
      c.assign(unique.begin(), unique.end() - 1);
    } else {
      const std::size_t n = values.size();
      for (int j = 1; j < n_bins; ++j) {
        const double v = values[static_cast<std::size_t>(j) * n / static_cast<std::size_t>(n_bins)];
        if (v < unique.back() && (c.empty() || v > c.back())) c.push_back(v);
      }
    }
  }
  return cuts;
}

struct SplitCandidate {
  double gain = 0.0;
  int feature = -1;
  int bin = -1;
};

}  // namespace detail

inline Matrix predict_margin(const GbtModel& model, const Matrix& x, const Matrix* base_margin = nullptr) {
  if (x.cols() != model.n_features) {
    throw ConfigError("feature width " + std::to_string(x.cols()) + " does not match model width " +
                      std::to_string(model.n_features));
  }
  const int width = model.width();
  Matrix out(x.rows(), width);
  if (base_margin) {
    if (base_margin->rows() != x.rows() || base_margin->cols() != width) throw ConfigError("base margin has the wrong shape");
    out = *base_margin;
  } else {
    for (Index i = 0; i < x.rows(); ++i) out.row(i) = model.initial_margin.transpose();
  }
  for (Index i = 0; i < x.rows(); ++i) {
    const double* row = x.row(i).data();
    for (const auto& round : model.rounds) {
      for (int k = 0; k < width; ++k) out(i, k) += round[static_cast<std::size_t>(k)].predict(row);
    }
  }
  return out;
}

namespace detail {

inline GbtModel fit_gbt_ordered(const Matrix& x, const Vector& y, const LossKind& loss, const GbtConfig& cfg,
                                const Vector* sample_weight, const Matrix* base_margin, GbtTrace* trace);

}  // namespace detail

// Second-order gradient boosting with histogram splits. sample_weight
// scales each row's gradient and hessian; base_margin (n x width) replaces
// the constant initial margin. Rows are put in a canonical (content-sorted)
// order first, so the fitted model does not depend on input row order.
inline GbtModel fit_gbt(const Matrix& x, const Vector& y, const LossKind& loss, const GbtConfig& cfg,
                        const Vector* sample_weight = nullptr, const Matrix* base_margin = nullptr,
                        GbtTrace* trace = nullptr) {
  const Index n = x.rows();
  if (y.size() != n) throw ConfigError("labels and features have different row counts");
  if (sample_weight && sample_weight->size() != n) throw ConfigError("sample weights misaligned with rows");
  if (base_margin && base_margin->rows() != n) throw ConfigError("base margin misaligned with rows");
  IndexList order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  auto less = [&](Index a, Index b) {
    for (Index j = 0; j < x.cols(); ++j) {
      if (x(a, j) != x(b, j)) return x(a, j) < x(b, j);
    }
    if (y[a] != y[b]) return y[a] < y[b];
    if (sample_weight && (*sample_weight)[a] != (*sample_weight)[b]) return (*sample_weight)[a] < (*sample_weight)[b];
    if (base_margin) {
      for (Index j = 0; j < base_margin->cols(); ++j) {
        if ((*base_margin)(a, j) != (*base_margin)(b, j)) return (*base_margin)(a, j) < (*base_margin)(b, j);
      }
    }
    return false;
  };
  std::stable_sort(order.begin(), order.end(), less);
  const Matrix xs = take_rows(x, order);
  const Vector ys = take(y, order);
  std::optional<Vector> ws;
  if (sample_weight) ws = take(*sample_weight, order);
  std::optional<Matrix> bs;
  if (base_margin) bs = take_rows(*base_margin, order);
  return detail::fit_gbt_ordered(xs, ys, loss, cfg, ws ? &*ws : nullptr, bs ? &*bs : nullptr, trace);
}

inline GbtModel detail::fit_gbt_ordered(const Matrix& x, const Vector& y, const LossKind& loss,
                                        const GbtConfig& cfg, const Vector* sample_weight,
                                        const Matrix* base_margin, GbtTrace* trace) {
  cfg.validate();
  const Index n = x.rows(), d = x.cols();
  const int width = loss.width();
  if (y.size() != n) throw ConfigError("labels and features have different row counts");
  if (sample_weight && sample_weight->size() != n) throw ConfigError("sample weights misaligned with rows");
  if (sample_weight && (sample_weight->array() < 0.0).any()) throw ConfigError("sample weights must be nonnegative");
  if (base_margin && (base_margin->rows() != n || base_margin->cols() != width)) {
    throw ConfigError("base margin must be n x " + std::to_string(width));
  }
  const Vector weight = sample_weight ? *sample_weight : Vector::Ones(n);

  GbtModel model;
  model.loss = loss;
  model.learning_rate = cfg.learning_rate;
  model.n_features = d;
  model.initial_margin = Vector::Zero(width);
  model.uses_base_margin = base_margin != nullptr;
  if (!base_margin && n > 0) {
    const double wsum = weight.sum();
    const double mean = wsum > 0 ? weight.dot(y) / wsum : 0.0;
    if (loss.type() == LossType::squared) {
      model.initial_margin[0] = mean;
    } else if (loss.type() == LossType::logistic) {
      const double p = std::clamp(mean, 1e-6, 1.0 - 1e-6);
      model.initial_margin[0] = std::log(p / (1.0 - p));
    }
  }

  Matrix margin(n, width);
  if (base_margin) {
    margin = *base_margin;
  } else {
    for (Index i = 0; i < n; ++i) margin.row(i) = model.initial_margin.transpose();
  }
  if (trace) trace->train_loss.push_back(mean_loss(loss, y, margin, &weight));
  if (cfg.n_estimators == 0 || n == 0) return model;

  const auto cuts = detail::quantile_cuts(x, cfg.n_bins);
  // Bin index per (row, feature).
  std::vector<std::uint16_t> bins(static_cast<std::size_t>(n * d));
  for (Index f = 0; f < d; ++f) {
    const auto& c = cuts[static_cast<std::size_t>(f)];
    for (Index i = 0; i < n; ++i) {
      const auto b = std::lower_bound(c.begin(), c.end(), x(i, f)) - c.begin();
      bins[static_cast<std::size_t>(i * d + f)] = static_cast<std::uint16_t>(b);
    }
  }

  Matrix grad(n, width), hess(n, width);
  std::vector<double> hist_g, hist_h;
  for (int round = 0; round < cfg.n_estimators; ++round) {
    for (Index i = 0; i < n; ++i) {
      loss_grad_hess(loss, y[i], margin.row(i).data(), grad.row(i).data(), hess.row(i).data());
    }
    grad.array().colwise() *= weight.array();
    hess.array().colwise() *= weight.array();
    if (!grad.allFinite() || !hess.allFinite()) throw NumericError("non-finite gradients in boosting round " + std::to_string(round));

    CounterRng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(round)));
    IndexList rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      if (cfg.subsample >= 1.0 || rng.bernoulli(cfg.subsample)) rows.push_back(i);
    }
    std::vector<int> features(static_cast<std::size_t>(d));
    std::iota(features.begin(), features.end(), 0);
    if (cfg.colsample_bytree < 1.0 && d > 1) {
      rng.shuffle(features);
      const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(cfg.colsample_bytree * static_cast<double>(d))));
      features.resize(std::min(keep, features.size()));
      std::sort(features.begin(), features.end());
    }

    std::vector<Tree> trees(static_cast<std::size_t>(width));
    for (int k = 0; k < width; ++k) {
      Tree& tree = trees[static_cast<std::size_t>(k)];
      struct Pending {
        int node;
        int depth;
        IndexList rows;
      };
      std::vector<Pending> frontier;
      tree.nodes.emplace_back();
      frontier.push_back({0, 0, rows});
      while (!frontier.empty()) {
        Pending item = std::move(frontier.back());
        frontier.pop_back();
        double g_sum = 0.0, h_sum = 0.0;
        for (Index i : item.rows) {
          g_sum += grad(i, k);
          h_sum += hess(i, k);
        }
        const double parent_score = g_sum * g_sum / (h_sum + cfg.leaf_l2);

        detail::SplitCandidate best;
        if (item.depth < cfg.max_depth && item.rows.size() >= 2) {
          for (int f : features) {
            const auto& c = cuts[static_cast<std::size_t>(f)];
            if (c.empty()) continue;
            const std::size_t n_bins = c.size() + 1;
            hist_g.assign(n_bins, 0.0);
            hist_h.assign(n_bins, 0.0);
            std::vector<Index> count(n_bins, 0);
            for (Index i : item.rows) {
              const auto b = bins[static_cast<std::size_t>(i * d + f)];
              hist_g[b] += grad(i, k);
              hist_h[b] += hess(i, k);
              ++count[b];
            }
            double gl = 0.0, hl = 0.0;
            Index cl = 0;
            const auto total = static_cast<Index>(item.rows.size());
            for (std::size_t b = 0; b + 1 < n_bins; ++b) {
              gl += hist_g[b];
              hl += hist_h[b];
              cl += count[b];
              if (cl == 0) continue;
              if (cl == total) break;
              const double gr = g_sum - gl, hr = h_sum - hl;
              if (hl < cfg.min_child_weight || hr < cfg.min_child_weight) continue;
              const double gain =
                  0.5 * (gl * gl / (hl + cfg.leaf_l2) + gr * gr / (hr + cfg.leaf_l2) - parent_score);
              if (gain > best.gain) best = {gain, f, static_cast<int>(b)};
            }
          }
        }

        if (best.feature < 0) {
          const double denom = h_sum + cfg.leaf_l2;
          auto& leaf = tree.nodes[static_cast<std::size_t>(item.node)];
          leaf.leaf_value = denom > 0 ? -g_sum / denom * cfg.learning_rate : 0.0;
          continue;
        }
        IndexList left_rows, right_rows;
        for (Index i : item.rows) {
          (bins[static_cast<std::size_t>(i * d + best.feature)] <= best.bin ? left_rows : right_rows).push_back(i);
        }
        const int left = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        auto& node = tree.nodes[static_cast<std::size_t>(item.node)];
        node.feature = best.feature;
        node.threshold = cuts[static_cast<std::size_t>(best.feature)][static_cast<std::size_t>(best.bin)];
        node.left = left;
        node.right = left + 1;
        // Right child pushed first so the left subtree is finished first.
        frontier.push_back({left + 1, item.depth + 1, std::move(right_rows)});
        frontier.push_back({left, item.depth + 1, std::move(left_rows)});
      }
    }
    for (Index i = 0; i < n; ++i) {
      const double* row = x.row(i).data();
      for (int k = 0; k < width; ++k) margin(i, k) += trees[static_cast<std::size_t>(k)].predict(row);
    }
    model.rounds.push_back(std::move(trees));
    if (trace) trace->train_loss.push_back(mean_loss(loss, y, margin, &weight));
  }
  return model;
}

}  // namespace mrda
