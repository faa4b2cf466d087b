#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mrda/losses.hpp"
#include "mrda/random.hpp"
#include "mrda/types.hpp"

namespace mrda::test {

inline Matrix normal_matrix(CounterRng& rng, Index rows, Index cols, double mean = 0.0, double sd = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal(mean, sd);
  return m;
}

inline Matrix uniform_matrix(CounterRng& rng, Index rows, Index cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = lo + (hi - lo) * rng.uniform();
  return m;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

// Largest relative gap between analytic and central-difference gradients
// and (diagonal) hessians of `loss` over `points` random (y, margin) draws.
inline double gradient_check(const LossKind& loss, CounterRng& rng, int points, double step = 1e-5) {
  const int k = loss.width();
  double worst = 0.0;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); };
  for (int p = 0; p < points; ++p) {
    double y = rng.normal();
    if (loss.type() == LossType::logistic) y = static_cast<double>(rng.below(2));
    if (loss.type() == LossType::softmax) y = static_cast<double>(rng.below(static_cast<std::uint64_t>(k)));
    std::vector<double> m(static_cast<std::size_t>(k)), g(m.size()), h(m.size()), gp(m.size()), hp(m.size()), gm(m.size());
    for (auto& v : m) v = 3.0 * (2.0 * rng.uniform() - 1.0);
    loss_grad_hess(loss, y, m.data(), g.data(), h.data());
    for (int j = 0; j < k; ++j) {
      auto up = m, down = m;
      up[static_cast<std::size_t>(j)] += step;
      down[static_cast<std::size_t>(j)] -= step;
      const double fd_g = (loss_value(loss, y, up.data()) - loss_value(loss, y, down.data())) / (2 * step);
      loss_grad_hess(loss, y, up.data(), gp.data(), hp.data());
      loss_grad_hess(loss, y, down.data(), gm.data(), hp.data());
      const double fd_h = (gp[static_cast<std::size_t>(j)] - gm[static_cast<std::size_t>(j)]) / (2 * step);
      worst = std::max({worst, rel(g[static_cast<std::size_t>(j)], fd_g), rel(h[static_cast<std::size_t>(j)], fd_h)});
    }
  }
  return worst;
}

// Base-model margins and labels for a stacking problem. Models are noisy
// copies of a latent score, and labels follow a scaled version of it, so
// the unconstrained combination often leaves the unit ball.
struct StackingInstance {
  std::vector<Matrix> margins;
  Vector y;
  LossKind loss = LossKind::squared();
};

inline StackingInstance random_stacking_instance(CounterRng& rng) {
  StackingInstance out;
  const int kind = static_cast<int>(rng.below(3));
  out.loss = kind == 0 ? LossKind::squared() : (kind == 1 ? LossKind::logistic() : LossKind::softmax(3));
  const int width = out.loss.width();
  const Index n = 40 + static_cast<Index>(rng.below(160));
  const int models = 1 + static_cast<int>(rng.below(5));
  const Matrix latent = normal_matrix(rng, n, width);
  for (int m = 0; m < models; ++m) {
    const double scale = 0.3 + rng.uniform();
    out.margins.push_back(scale * latent + (0.2 + 0.8 * rng.uniform()) * normal_matrix(rng, n, width));
  }
  const double strength = 0.2 + 4.0 * rng.uniform();
  out.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    if (kind == 0) {
      out.y[i] = strength * latent(i, 0) + 0.3 * rng.normal();
    } else if (kind == 1) {
      out.y[i] = rng.uniform() < sigmoid(strength * latent(i, 0)) ? 1.0 : 0.0;
    } else {
      Vector logits = strength * latent.row(i).transpose();
      logits.array() -= logits.maxCoeff();
      Vector p = logits.array().exp().matrix();
      p /= p.sum();
      const double u = rng.uniform();
      out.y[i] = u < p[0] ? 0.0 : (u < p[0] + p[1] ? 1.0 : 2.0);
    }
  }
  return out;
}

}  // namespace mrda::test
