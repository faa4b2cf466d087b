#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mrda/data.hpp"
#include "mrda/parallel.hpp"
#include "mrda/random.hpp"
#include "mrda/types.hpp"

namespace mrda {

// ---------------------------------------------------------------------------
// Kernels. Each takes two equally long rows.

struct GaussianKernel {
  double bandwidth = 1.0;

  double operator()(std::span<const double> a, std::span<const double> b) const {
    double sq = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) sq += (a[j] - b[j]) * (a[j] - b[j]);
    return std::exp(-sq / (2.0 * bandwidth * bandwidth));
  }
};

// Positive definite delta kernel I(a == b) on categorical codes.
struct DeltaKernel {
  double operator()(std::span<const double> a, std::span<const double> b) const {
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (a[j] != b[j]) return 0.0;
    }
    return 1.0;
  }
};

// k((y, x), (y', x')) = k_y(y, y') * k_x(x, x') on rows laid out [y, x...].
template <class LabelKernel, class FeatureKernel>
struct ProductKernel {
  LabelKernel label;
  FeatureKernel feature;

  double operator()(std::span<const double> a, std::span<const double> b) const {
    return label(a.first(1), b.first(1)) * feature(a.subspan(1), b.subspan(1));
  }
};

// Unbiased squared-MMD U-statistic between the rows of u and v.
template <class Kernel>
double mmd_unbiased(const Matrix& u, const Matrix& v, const Kernel& kernel) {
  const Index m1 = u.rows(), m2 = v.rows();
  if (m1 < 2 || m2 < 2) throw ConfigError("MMD needs at least 2 samples on each side");
  if (u.cols() != v.cols()) throw ConfigError("MMD samples have different dimensions");
  const auto dim = static_cast<std::size_t>(u.cols());
  auto row = [dim](const Matrix& x, Index i) { return std::span<const double>(x.row(i).data(), dim); };
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (Index i = 0; i < m1; ++i) {
    for (Index j = 0; j < m1; ++j) {
      if (i != j) uu += kernel(row(u, i), row(u, j));
    }
  }
  for (Index i = 0; i < m2; ++i) {
    for (Index j = 0; j < m2; ++j) {
      if (i != j) vv += kernel(row(v, i), row(v, j));
    }
  }
  // Summed in sorted order so swapping u and v gives the same bits.
  std::vector<double> cross;
  cross.reserve(static_cast<std::size_t>(m1 * m2));
  for (Index i = 0; i < m1; ++i) {
    for (Index j = 0; j < m2; ++j) cross.push_back(kernel(row(u, i), row(v, j)));
  }
  std::sort(cross.begin(), cross.end());
  for (double k : cross) uv += k;
  const double a = static_cast<double>(m1), b = static_cast<double>(m2);
  return uu / (a * (a - 1.0)) + vv / (b * (b - 1.0)) - 2.0 * uv / (a * b);
}

// Median pairwise Euclidean distance over at most 1000 rows; 1.0 when
// the median is zero.
inline double median_bandwidth(const Matrix& x, std::uint64_t seed) {
  if (x.rows() < 2) throw ConfigError("median bandwidth needs at least 2 rows");
  IndexList rows(static_cast<std::size_t>(x.rows()));
  std::iota(rows.begin(), rows.end(), Index{0});
  constexpr std::size_t kMaxRows = 1000;
  if (rows.size() > kMaxRows) {
    CounterRng rng(derive_seed(seed, 0xba4d));
    rng.shuffle(rows);
    rows.resize(kMaxRows);
  }
  std::vector<double> dist;
  dist.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) dist.push_back((x.row(rows[i]) - x.row(rows[j])).norm());
  }
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  double median = dist[mid];
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  return median > 0.0 ? median : 1.0;
}

// Joint (label, feature) kernel: Gaussian on features, delta on class
// labels, Gaussian on regression labels. Unset bandwidths resolve by the
// median heuristic on the training data.
struct KernelSpec {
  std::optional<double> feature_bandwidth;
  std::optional<double> label_bandwidth;
};

struct SegmentDistanceMatrix {
  Matrix values;  // N_S x N_S, symmetric, zero diagonal
  std::vector<std::string> segment_names;

  int size() const { return static_cast<int>(values.rows()); }
};

namespace detail {

// Sum of exp(-0.5 * |a_i - b_j|^2) over all pairs of rows.
inline double gaussian_block_sum(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0 || b.rows() == 0) return 0.0;
  const Vector an = a.rowwise().squaredNorm();
  const Vector bn = b.rowwise().squaredNorm();
  Matrix sq = a * b.transpose();
  sq *= -2.0;
  sq.colwise() += an;
  sq.rowwise() += bn.transpose();
  return (-0.5 * sq.array().max(0.0)).exp().sum();
}

// A segment sample prepared for fast kernel sums: scaled feature rows,
// split by class for delta label kernels.
struct PreparedSample {
  std::vector<Matrix> parts;  // one part per class (classification) or a single part
  Index rows = 0;
};

inline double cross_sum(const PreparedSample& a, const PreparedSample& b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.parts.size(); ++c) s += gaussian_block_sum(a.parts[c], b.parts[c]);
  return s;
}

}  // namespace detail

// Pairwise unbiased MMD between the joint (y, x) samples of every segment.
// Negative estimates are floored at zero.
inline SegmentDistanceMatrix segment_distance_matrix(const Dataset& train, const KernelSpec& kernel,
                                                     Index max_per_segment = 2000, std::uint64_t seed = 0,
                                                     unsigned threads = 0) {
  if (!train.has_labels()) throw ConfigError("segment clustering needs labeled training data");
  const auto by_segment = train.rows_by_segment();
  const int ns = train.n_segments();
  for (int s = 0; s < ns; ++s) {
    if (by_segment[static_cast<std::size_t>(s)].size() < 2) {
      throw DataError("segment '" + train.segment_names[static_cast<std::size_t>(s)] +
                      "' has fewer than 2 training rows");
    }
  }
  const double feature_bw = kernel.feature_bandwidth.value_or(
      train.dims() > 0 ? median_bandwidth(train.features, derive_seed(seed, 1)) : 1.0);
  const bool categorical = train.task.is_classification();
  double label_bw = 1.0;
  if (!categorical) {
    label_bw = kernel.label_bandwidth.value_or(median_bandwidth(Matrix(train.labels), derive_seed(seed, 2)));
  }
  if (!(feature_bw > 0.0) || !(label_bw > 0.0)) throw ConfigError("kernel bandwidths must be positive");

  std::vector<detail::PreparedSample> samples(static_cast<std::size_t>(ns));
  for (int s = 0; s < ns; ++s) {
    IndexList rows = by_segment[static_cast<std::size_t>(s)];
    if (static_cast<Index>(rows.size()) > max_per_segment) {
      CounterRng rng(derive_seed(seed, 3, name_hash(train.segment_names[static_cast<std::size_t>(s)])));
      rng.shuffle(rows);
      rows.resize(static_cast<std::size_t>(max_per_segment));
      std::sort(rows.begin(), rows.end());
    }
    auto& sample = samples[static_cast<std::size_t>(s)];
    sample.rows = static_cast<Index>(rows.size());
    if (categorical) {
      std::vector<IndexList> by_class(static_cast<std::size_t>(train.task.classes()));
      for (Index r : rows) by_class[static_cast<std::size_t>(train.label_class(r))].push_back(r);
      for (const auto& cls : by_class) sample.parts.push_back(take_rows(train.features, cls) / feature_bw);
    } else {
      Matrix joint(static_cast<Index>(rows.size()), train.dims() + 1);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        joint(static_cast<Index>(i), 0) = train.labels[rows[i]] / label_bw;
        joint.row(static_cast<Index>(i)).tail(train.dims()) = train.features.row(rows[i]) / feature_bw;
      }
      sample.parts.push_back(std::move(joint));
    }
  }

  // Within-segment means exclude the diagonal, where the kernel is 1.
  std::vector<double> within(static_cast<std::size_t>(ns));
  parallel_for(static_cast<std::size_t>(ns), threads, [&](std::size_t s) {
    const auto& sample = samples[s];
    const double m = static_cast<double>(sample.rows);
    within[s] = (detail::cross_sum(sample, sample) - m) / (m * (m - 1.0));
  });

  std::vector<std::pair<int, int>> pairs;
  for (int a = 0; a < ns; ++a) {
    for (int b = a + 1; b < ns; ++b) pairs.emplace_back(a, b);
  }
  SegmentDistanceMatrix out;
  out.segment_names = train.segment_names;
  out.values = Matrix::Zero(ns, ns);
  parallel_for(pairs.size(), threads, [&](std::size_t p) {
    const auto [a, b] = pairs[p];
    const auto& sa = samples[static_cast<std::size_t>(a)];
    const auto& sb = samples[static_cast<std::size_t>(b)];
    const double cross = detail::cross_sum(sa, sb) / (static_cast<double>(sa.rows) * static_cast<double>(sb.rows));
    const double mmd = within[static_cast<std::size_t>(a)] + within[static_cast<std::size_t>(b)] - 2.0 * cross;
    out.values(a, b) = out.values(b, a) = std::max(0.0, mmd);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Agglomerative clustering

// Disjoint, nonempty segment sets covering every segment. The implicit
// all-segments group is not stored.
struct ClusterAssignment {
  std::vector<std::vector<int>> clusters;  // each sorted; ordered by smallest member
  int n_segments = 0;

  int m() const { return static_cast<int>(clusters.size()); }

  std::vector<int> cluster_of() const {
    std::vector<int> out(static_cast<std::size_t>(n_segments), -1);
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      for (int s : clusters[c]) out[static_cast<std::size_t>(s)] = static_cast<int>(c);
    }
    return out;
  }

  void validate() const {
    if (clusters.empty()) throw ConfigError("cluster assignment needs at least one cluster");
    std::vector<int> seen(static_cast<std::size_t>(n_segments), 0);
    for (const auto& c : clusters) {
      if (c.empty()) throw ConfigError("empty cluster");
      for (int s : c) {
        if (s < 0 || s >= n_segments) throw ConfigError("cluster member out of range");
        if (seen[static_cast<std::size_t>(s)]++) throw ConfigError("segment in more than one cluster");
      }
    }
    for (int s = 0; s < n_segments; ++s) {
      if (!seen[static_cast<std::size_t>(s)]) throw ConfigError("segment " + std::to_string(s) + " is in no cluster");
    }
  }
};

struct WardMerge {
  std::vector<int> left, right;  // members of the merged clusters
  double cost = 0.0;             // linkage value at the merge
};

// Full Ward merge sequence on D read as squared distances (Lance-Williams
// update). Ties go to the lexicographically smallest pair of clusters,
// each identified by its smallest segment index.
inline std::vector<WardMerge> ward_merges(const Matrix& distances, int stop_at = 1) {
  const Index n = distances.rows();
  if (distances.cols() != n) throw ConfigError("distance matrix must be square");
  Matrix d = distances;
  std::vector<std::vector<int>> members(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) members[static_cast<std::size_t>(i)] = {static_cast<int>(i)};
  std::vector<bool> active(static_cast<std::size_t>(n), true);
  std::vector<WardMerge> merges;
  for (Index remaining = n; remaining > stop_at; --remaining) {
    Index bi = -1, bj = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
      if (!active[static_cast<std::size_t>(i)]) continue;
      for (Index j = i + 1; j < n; ++j) {
        if (!active[static_cast<std::size_t>(j)]) continue;
        if (d(i, j) < best) {
          best = d(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    auto& mi = members[static_cast<std::size_t>(bi)];
    auto& mj = members[static_cast<std::size_t>(bj)];
    merges.push_back({mi, mj, best});
    const double ni = static_cast<double>(mi.size()), nj = static_cast<double>(mj.size());
    for (Index k = 0; k < n; ++k) {
      if (!active[static_cast<std::size_t>(k)] || k == bi || k == bj) continue;
      const double nk = static_cast<double>(members[static_cast<std::size_t>(k)].size());
      const double updated = ((ni + nk) * d(k, bi) + (nj + nk) * d(k, bj) - nk * best) / (ni + nj + nk);
      d(k, bi) = d(bi, k) = updated;
    }
    mi.insert(mi.end(), mj.begin(), mj.end());
    std::sort(mi.begin(), mi.end());
    mj.clear();
    active[static_cast<std::size_t>(bj)] = false;
  }
  return merges;
}

// Ward-linkage agglomerative clustering cut at m clusters.
inline ClusterAssignment cluster_segments(const SegmentDistanceMatrix& distances, int m) {
  const int ns = distances.size();
  if (m < 1 || m > ns) {
    throw ConfigError("cluster count " + std::to_string(m) + " outside [1, " + std::to_string(ns) + "]");
  }
  std::vector<std::vector<int>> members(static_cast<std::size_t>(ns));
  for (int s = 0; s < ns; ++s) members[static_cast<std::size_t>(s)] = {s};
  for (const auto& merge : ward_merges(distances.values, m)) {
    const int keep = merge.left.front();
    const int drop = merge.right.front();
    auto& target = members[static_cast<std::size_t>(keep)];
    target.insert(target.end(), merge.right.begin(), merge.right.end());
    std::sort(target.begin(), target.end());
    members[static_cast<std::size_t>(drop)].clear();
  }
  ClusterAssignment out;
  out.n_segments = ns;
  for (auto& c : members) {
    if (!c.empty()) out.clusters.push_back(std::move(c));
  }
  return out;
}

// Largest m whose clustering has no cluster smaller than min_cluster_size;
// 1 when no such m exists.
inline int choose_num_clusters(const SegmentDistanceMatrix& distances, int min_cluster_size = 2) {
  const int ns = distances.size();
  if (ns < 1) throw ConfigError("no segments to cluster");
  for (int m = ns; m >= 1; --m) {
    const auto assignment = cluster_segments(distances, m);
    const bool ok = std::all_of(assignment.clusters.begin(), assignment.clusters.end(),
                                [&](const auto& c) { return static_cast<int>(c.size()) >= min_cluster_size; });
    if (ok) return m;
  }
  return 1;
}

}  // namespace mrda
