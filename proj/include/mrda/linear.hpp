#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "mrda/losses.hpp"
#include "mrda/types.hpp"

namespace mrda {

// A generalized linear problem in margin space. Row i, class k has margin
// design[k].row(i) . theta; width-1 losses use a single design matrix.
struct GlmProblem {
  std::vector<Matrix> design;
  Vector y;
  LossKind loss = LossKind::squared();
  Vector weights;  // per row, nonnegative
  Vector penalty;  // per parameter; objective adds 0.5 * penalty_p * theta_p^2
};

struct GlmOptions {
  int max_iter = 100;
  double grad_tol = 1e-8;
  // Squared loss with zero penalty refuses rank-deficient normal equations.
  bool reject_singular = true;
};

struct GlmFit {
  Vector theta;
  int iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
};

namespace detail {

inline Matrix glm_margins(const GlmProblem& p, const Vector& theta) {
  const Index n = p.design.front().rows();
  Matrix m(n, static_cast<Index>(p.design.size()));
  for (std::size_t k = 0; k < p.design.size(); ++k) m.col(static_cast<Index>(k)) = p.design[k] * theta;
  return m;
}

inline double glm_objective(const GlmProblem& p, const Vector& theta, const Matrix& margins) {
  double total = 0.5 * (p.penalty.array() * theta.array().square()).sum();
  for (Index i = 0; i < margins.rows(); ++i) {
    if (p.weights[i] == 0.0) continue;
    total += p.weights[i] * loss_value(p.loss, p.y[i], margins.row(i).data());
  }
  return total;
}

}  // namespace detail

// Damped Newton with backtracking on the penalized weighted loss.
inline GlmFit solve_glm(const GlmProblem& p, const GlmOptions& opt = {}) {
  const std::size_t k = p.design.size();
  const Index n = p.design.front().rows();
  const Index dim = p.design.front().cols();
  GlmFit fit;
  fit.theta = Vector::Zero(dim);
  Matrix margins = detail::glm_margins(p, fit.theta);
  double objective = detail::glm_objective(p, fit.theta, margins);

  const bool quadratic = p.loss.type() == LossType::squared;
  Vector grad(dim);
  Matrix hess(dim, dim);
  std::vector<double> row_p(k);
  Matrix coupling(n, static_cast<Index>(k * k));

  for (int iter = 0; iter < opt.max_iter; ++iter) {
    // Per-row gradient factors r_ik and hessian couplings S_i,kl.
    Matrix r(n, static_cast<Index>(k));
    for (Index i = 0; i < n; ++i) {
      const double w = p.weights[i];
      if (p.loss.type() == LossType::softmax) {
        const int kk = static_cast<int>(k);
        const double lse = log_sum_exp(margins.row(i).data(), kk);
        for (int a = 0; a < kk; ++a) row_p[static_cast<std::size_t>(a)] = std::exp(margins(i, a) - lse);
        const int label = static_cast<int>(p.y[i]);
        for (int a = 0; a < kk; ++a) {
          r(i, a) = w * (row_p[static_cast<std::size_t>(a)] - (a == label ? 1.0 : 0.0));
          for (int b = 0; b < kk; ++b) {
            const double pa = row_p[static_cast<std::size_t>(a)], pb = row_p[static_cast<std::size_t>(b)];
            coupling(i, a * kk + b) = w * ((a == b ? pa : 0.0) - pa * pb);
          }
        }
      } else {
        double g, h;
        loss_grad_hess(p.loss, p.y[i], margins.row(i).data(), &g, &h);
        r(i, 0) = w * g;
        coupling(i, 0) = w * h;
      }
    }
    grad = (p.penalty.array() * fit.theta.array()).matrix();
    for (std::size_t a = 0; a < k; ++a) grad.noalias() += p.design[a].transpose() * r.col(static_cast<Index>(a));
    fit.grad_norm = grad.norm();
    fit.iterations = iter;
    if (fit.grad_norm <= opt.grad_tol) {
      fit.converged = true;
      return fit;
    }

    hess = p.penalty.asDiagonal();
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = a; b < k; ++b) {
        const Matrix block = p.design[a].transpose() *
                             coupling.col(static_cast<Index>(a * k + b)).asDiagonal() * p.design[b];
        hess += block;
        if (b != a) hess += block.transpose();
      }
    }

    Vector step;
    if (quadratic) {
      if (opt.reject_singular) {
        Eigen::ColPivHouseholderQR<Matrix> qr(hess);
        qr.setThreshold(1e-12);
        if (qr.rank() < dim) {
          throw NumericError("singular normal equations; use a positive l2 penalty");
        }
        step = -qr.solve(grad);
      } else {
        step = -hess.ldlt().solve(grad);
      }
    } else {
      // Tiny diagonal damping keeps redundant softmax directions solvable;
      // it changes the step, never the fixed point.
      const double damping = 1e-10 * (hess.diagonal().cwiseAbs().maxCoeff() + 1.0);
      step = -(hess + damping * Matrix::Identity(dim, dim)).ldlt().solve(grad);
    }
    if (!step.allFinite()) throw NumericError("Newton step is not finite");
    // Newton decrement below rounding level of the objective.
    if (-grad.dot(step) <= 1e-15 * (std::abs(objective) + 1.0)) {
      fit.converged = true;
      return fit;
    }

    // Backtracking line search on the objective.
    double t = 1.0;
    Vector candidate;
    Matrix candidate_margins;
    double candidate_objective = objective;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      candidate = fit.theta + t * step;
      candidate_margins = detail::glm_margins(p, candidate);
      candidate_objective = detail::glm_objective(p, candidate, candidate_margins);
      if (candidate_objective <= objective + 1e-4 * t * grad.dot(step) || quadratic) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;
    fit.theta = std::move(candidate);
    margins = std::move(candidate_margins);
    objective = candidate_objective;
  }
  // Gradient at the returned point, for reporting.
  Vector final_grad = (p.penalty.array() * fit.theta.array()).matrix();
  std::vector<double> g(static_cast<std::size_t>(p.loss.width())), h(g.size());
  Matrix r(n, static_cast<Index>(k));
  for (Index i = 0; i < n; ++i) {
    loss_grad_hess(p.loss, p.y[i], margins.row(i).data(), g.data(), h.data());
    for (std::size_t a = 0; a < k; ++a) r(i, static_cast<Index>(a)) = p.weights[i] * g[a];
  }
  for (std::size_t a = 0; a < k; ++a) final_grad.noalias() += p.design[a].transpose() * r.col(static_cast<Index>(a));
  fit.grad_norm = final_grad.norm();
  fit.converged = fit.grad_norm <= opt.grad_tol;
  return fit;
}

// Linear model: margins = x * coefficients + intercept (one column per
// margin width).
struct LinearModel {
  Matrix coefficients;  // d x width
  Vector intercept;     // width
  LossKind loss = LossKind::squared();
  double l2 = 0.0;
};

struct LinearFitOptions {
  bool fit_intercept = true;
  int max_iter = 100;
  double grad_tol = 1e-8;
};

inline Matrix predict_margin(const LinearModel& model, const Matrix& x) {
  if (x.cols() != model.coefficients.rows()) {
    throw ConfigError("feature width " + std::to_string(x.cols()) + " does not match model width " +
                      std::to_string(model.coefficients.rows()));
  }
  Matrix m = x * model.coefficients;
  m.rowwise() += model.intercept.transpose();
  return m;
}

// Minimizes sum_i w_i loss_i + (l2 / 2) * ||coefficients||^2 with the
// intercept unpenalized.
inline LinearModel fit_linear(const Matrix& x, const Vector& y, const LossKind& loss, double l2,
                              const Vector* sample_weight = nullptr, const LinearFitOptions& opt = {}) {
  if (!(l2 >= 0.0)) throw ConfigError("l2 must be nonnegative");
  if (y.size() != x.rows()) throw ConfigError("labels and features have different row counts");
  const Index n = x.rows(), d = x.cols();
  const int width = loss.width();
  const Index per_class = d + (opt.fit_intercept ? 1 : 0);

  GlmProblem p;
  p.y = y;
  p.loss = loss;
  if (sample_weight) {
    if (sample_weight->size() != n) throw ConfigError("sample weights misaligned with rows");
    if ((sample_weight->array() < 0.0).any()) throw ConfigError("sample weights must be nonnegative");
    p.weights = *sample_weight;
  } else {
    p.weights = Vector::Ones(n);
  }
  Matrix augmented(n, per_class);
  augmented.leftCols(d) = x;
  if (opt.fit_intercept) augmented.col(d).setOnes();

  const Index dim = per_class * width;
  p.penalty = Vector::Zero(dim);
  for (int k = 0; k < width; ++k) {
    p.penalty.segment(k * per_class, d).setConstant(l2);
  }
  if (width == 1) {
    p.design.push_back(std::move(augmented));
  } else {
    for (int k = 0; k < width; ++k) {
      Matrix block = Matrix::Zero(n, dim);
      block.middleCols(k * per_class, per_class) = augmented;
      p.design.push_back(std::move(block));
    }
  }
  GlmOptions gopt;
  gopt.max_iter = opt.max_iter;
  gopt.grad_tol = opt.grad_tol;
  gopt.reject_singular = l2 == 0.0;
  const GlmFit fit = solve_glm(p, gopt);

  LinearModel model;
  model.loss = loss;
  model.l2 = l2;
  model.coefficients.resize(d, width);
  model.intercept = Vector::Zero(width);
  for (int k = 0; k < width; ++k) {
    model.coefficients.col(k) = fit.theta.segment(k * per_class, d);
    if (opt.fit_intercept) model.intercept[k] = fit.theta[k * per_class + d];
  }
  return model;
}

}  // namespace mrda
