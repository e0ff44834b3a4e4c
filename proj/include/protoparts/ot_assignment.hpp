#ifndef PROTOPARTS_OT_ASSIGNMENT_HPP_
#define PROTOPARTS_OT_ASSIGNMENT_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "protoparts/core_types.hpp"

namespace protoparts {

struct SinkhornConfig {
  double kappa = 0.05;  // entropic regularization
  int max_iters = 100;
  double marginal_tol = 1e-6;

  void validate() const {
    if (!(kappa > 0.0)) throw Error(ErrorCode::InvalidParams, "kappa must be > 0");
    if (max_iters < 1) throw Error(ErrorCode::InvalidParams, "max_iters must be >= 1");
    if (!(marginal_tol > 0.0)) throw Error(ErrorCode::InvalidParams, "marginal_tol must be > 0");
  }
};

/// Relaxed assignment of N patches to K prototypes with row sums 1/N and
/// column sums 1/K. The scalings are kept in log space; u() and v() expose
/// them as plain vectors.
struct TransportPlan {
  Tensor<double> plan;  // [N, K]
  std::vector<double> log_u;
  std::vector<double> log_v;
  bool converged = false;
  int iters_used = 0;
  // Max-abs marginal residual after each full (row, column) sweep.
  std::vector<double> residuals;

  std::vector<double> u() const { return exp_all(log_u); }
  std::vector<double> v() const { return exp_all(log_v); }

 private:
  static std::vector<double> exp_all(std::vector<double> x) {
    for (auto& e : x) e = std::exp(e);
    return x;
  }
};

struct HardAssignment {
  std::vector<std::size_t> assign;  // [N], values in [0, K)
  bool operator==(const HardAssignment&) const = default;
};

namespace detail {

inline double log_sum_exp(const double* x, std::size_t n, std::size_t stride) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i * stride]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i * stride] - m);
  return m + std::log(s);
}

}  // namespace detail

/// Max-abs deviation of a plan's row and column sums from 1/N and 1/K.
inline double marginal_residual(const Tensor<double>& plan) {
  const std::size_t n = plan.dim(0), k = plan.dim(1);
  const double a = 1.0 / static_cast<double>(n), b = 1.0 / static_cast<double>(k);
  double worst = 0.0;
  std::vector<double> col(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      row += plan(i, j);
      col[j] += plan(i, j);
    }
    worst = std::max(worst, std::abs(row - a));
  }
  for (double c : col) worst = std::max(worst, std::abs(c - b));
  return worst;
}

/// Entropic balanced transport between N patches and K prototypes,
/// maximizing Tr(A^T S) + kappa * H(A). Log-domain Sinkhorn-Knopp, so
/// S / kappa may be far outside the range of exp().
inline TransportPlan sinkhorn_plan(const Tensor<double>& scores, const SinkhornConfig& cfg) {
  cfg.validate();
  if (scores.rank() != 2 || scores.dim(0) < 1 || scores.dim(1) < 1) {
    throw Error(ErrorCode::InvariantViolation, "sinkhorn_plan needs a non-empty [N, K] score matrix");
  }
  const std::size_t n = scores.dim(0), k = scores.dim(1);
  for (double s : scores.values()) {
    if (!std::isfinite(s)) throw Error(ErrorCode::InvariantViolation, "non-finite score");
  }
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(k));

  std::vector<double> logits(scores.size());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = scores.data()[i] / cfg.kappa;

  TransportPlan out;
  out.log_u.assign(n, 0.0);
  out.log_v.assign(k, 0.0);
  std::vector<double> work(std::max(n, k));

  auto residual = [&] {
    double worst = 0.0;
    std::vector<double> col(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double p = std::exp(logits[i * k + j] + out.log_u[i] + out.log_v[j]);
        row += p;
        col[j] += p;
      }
      worst = std::max(worst, std::abs(row - std::exp(log_a)));
    }
    for (double c : col) worst = std::max(worst, std::abs(c - std::exp(log_b)));
    return worst;
  };

  for (int it = 1; it <= cfg.max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) work[j] = logits[i * k + j] + out.log_v[j];
      out.log_u[i] = log_a - detail::log_sum_exp(work.data(), k, 1);
    }
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t i = 0; i < n; ++i) work[i] = logits[i * k + j] + out.log_u[i];
      out.log_v[j] = log_b - detail::log_sum_exp(work.data(), n, 1);
    }
    out.iters_used = it;
    out.residuals.push_back(residual());
    if (out.residuals.back() <= cfg.marginal_tol) {
      out.converged = true;
      break;
    }
  }

  out.plan = Tensor<double>({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(logits[i * k + j] + out.log_u[i] + out.log_v[j]);
      if (!std::isfinite(p)) throw Error(ErrorCode::NumericalOverflow, "transport plan overflowed");
      out.plan(i, j) = p;
    }
  }
  return out;
}

/// Per-row argmax of the soft plan; ties go to the lowest prototype index.
inline HardAssignment harden_assignment(const Tensor<double>& plan) {
  HardAssignment out;
  const std::size_t n = plan.dim(0), k = plan.dim(1);
  out.assign.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (plan(i, j) > plan(i, best)) best = j;
    }
    out.assign[i] = best;
  }
  return out;
}

inline HardAssignment harden_assignment(const TransportPlan& plan) {
  return harden_assignment(plan.plan);
}

/// Unconstrained assignment: every patch goes to its most similar prototype.
/// This is the "no constraints" ablation of the balanced solver.
inline HardAssignment greedy_assignment(const Tensor<double>& scores) {
  return harden_assignment(scores);
}

/// Tr(A^T S) for the one-hot matrix A encoded by `assign`.
inline double assignment_objective(const HardAssignment& assign, const Tensor<double>& scores) {
  if (assign.assign.size() != scores.dim(0)) {
    throw Error(ErrorCode::DimMismatch, "assignment length differs from N");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < assign.assign.size(); ++i) total += scores(i, assign.assign[i]);
  return total;
}

}  // namespace protoparts

#endif  // PROTOPARTS_OT_ASSIGNMENT_HPP_
