#include "fsqs/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "fsqs/error.hpp"

namespace fsqs {

namespace {

void check_finite(const Matrix& m, const char* name) {
  if (!m.allFinite()) {
    throw InputError(std::string(name) + " contains non-finite entries");
  }
}

void check_marginals(const MarginalWeights& w, Eigen::Index n_s, Eigen::Index n_q) {
  if (w.source.size() != n_s || w.target.size() != n_q) {
    throw InputError("marginal lengths do not match cost dimensions");
  }
  constexpr double kSumTol = 1e-12;
  for (const Vector* v : {&w.source, &w.target}) {
    if ((v->array() < 0.0).any()) throw InputError("marginal weights must be nonnegative");
    if (std::abs(v->sum() - 1.0) > kSumTol) throw InputError("marginal weights must sum to 1");
  }
}

// log(sum_k exp(x_k)) with max subtraction.
double log_sum_exp(const Vector& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf
  return m + std::log((x.array() - m).exp().sum());
}

}  // namespace

MarginalWeights uniform_marginals(Eigen::Index n_source, Eigen::Index n_target) {
  if (n_source < 1 || n_target < 1) throw InputError("marginals need at least one point per side");
  MarginalWeights w;
  w.source = Vector::Constant(n_source, 1.0 / static_cast<double>(n_source));
  w.target = Vector::Constant(n_target, 1.0 / static_cast<double>(n_target));
  return w;
}

Matrix cost_matrix(const Matrix& source, const Matrix& target, CostMetric metric) {
  if (source.cols() != target.cols()) {
    throw InputError("cost_matrix: feature dimensions differ (" +
                     std::to_string(source.cols()) + " vs " + std::to_string(target.cols()) + ")");
  }
  if (source.rows() < 1 || target.rows() < 1) {
    throw InputError("cost_matrix: empty point set");
  }
  check_finite(source, "source");
  check_finite(target, "target");

  // ||a-b||^2 = ||a||^2 + ||b||^2 - 2 a.b, clamped against tiny negative
  // round-off on (near-)coincident points.
  const Vector s2 = source.rowwise().squaredNorm();
  const Vector t2 = target.rowwise().squaredNorm();
  Matrix c = (-2.0 * source * target.transpose());
  c.colwise() += s2;
  c.rowwise() += t2.transpose();
  c = c.cwiseMax(0.0);
  if (metric == CostMetric::Euclidean) c = c.cwiseSqrt();
  return c;
}

TransportPlan sinkhorn(const Matrix& cost, const MarginalWeights& marginals,
                       const SinkhornConfig& config) {
  if (!(config.epsilon > 0.0)) throw InputError("sinkhorn: epsilon must be > 0");
  if (!(config.tol > 0.0)) throw InputError("sinkhorn: tol must be > 0");
  if (config.max_iters < 1) throw InputError("sinkhorn: max_iters must be >= 1");
  check_finite(cost, "cost");

  const Eigen::Index n_s = cost.rows();
  const Eigen::Index n_q = cost.cols();
  check_marginals(marginals, n_s, n_q);

  const Vector log_a = marginals.source.array().max(1e-300).log();
  const Vector log_b = marginals.target.array().max(1e-300).log();

  // Dual potentials; plan entries are exp((f_i + g_j - C_ij) / eps).
  Vector f = Vector::Zero(n_s);
  Vector g = Vector::Zero(n_q);

  TransportPlan plan;
  plan.converged = false;
  plan.iterations = 0;

  auto rebuild_plan = [&](double eps) {
    plan.values = ((f.replicate(1, n_q) + g.transpose().replicate(n_s, 1) - cost) / eps)
                      .array()
                      .exp()
                      .matrix();
    const Vector row_err = (plan.values.rowwise().sum() - marginals.source).cwiseAbs();
    const Vector col_err = (plan.values.colwise().sum().transpose() - marginals.target).cwiseAbs();
    plan.feasibility_error = std::max(row_err.maxCoeff(), col_err.maxCoeff());
  };

  // Epsilon scaling: anneal from a coarse regularization down to the target,
  // warm-starting the potentials at each stage. Small target epsilons
  // (1e-3 on O(1) costs) converge orders of magnitude faster this way; the
  // final stage still iterates at config.epsilon until config.tol, so the
  // returned plan is the target-epsilon optimum.
  std::vector<double> schedule;
  const double coarse = std::max(config.epsilon, cost.maxCoeff() / 8.0);
  for (double e = coarse; e > config.epsilon * 2.0; e /= 2.0) schedule.push_back(e);
  schedule.push_back(config.epsilon);

  for (std::size_t stage = 0; stage < schedule.size() && plan.iterations < config.max_iters;
       ++stage) {
    const double eps = schedule[stage];
    const bool final_stage = stage + 1 == schedule.size();
    const double stage_tol = final_stage ? config.tol : std::max(config.tol, 1e-5);
    while (plan.iterations < config.max_iters) {
      for (Eigen::Index i = 0; i < n_s; ++i) {
        f(i) = eps * (log_a(i) - log_sum_exp(((g - cost.row(i).transpose()) / eps)));
      }
      for (Eigen::Index j = 0; j < n_q; ++j) {
        g(j) = eps * (log_b(j) - log_sum_exp(((f - cost.col(j)) / eps)));
      }
      ++plan.iterations;
      rebuild_plan(eps);
      if (plan.feasibility_error <= stage_tol) {
        plan.converged = final_stage;
        break;
      }
    }
  }
  if (!plan.converged) rebuild_plan(config.epsilon);
  return plan;
}

std::pair<TransportPlan, double> exact_ot_oracle(const Matrix& cost) {
  const Eigen::Index n = cost.rows();
  if (cost.cols() != n) throw InputError("exact_ot_oracle: cost must be square");
  if (n < 1) throw InputError("exact_ot_oracle: empty cost");
  if (n > 8) throw InputError("exact_ot_oracle: refusing n > 8 (n! couplings)");
  check_finite(cost, "cost");

  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  double best_sum = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += cost(i, perm[static_cast<std::size_t>(i)]);
    if (s < best_sum) {
      best_sum = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  TransportPlan plan;
  plan.values = Matrix::Zero(n, n);
  const double mass = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) plan.values(i, best[static_cast<std::size_t>(i)]) = mass;
  plan.feasibility_error = 0.0;
  plan.converged = true;
  return {plan, best_sum * mass};
}

TransportPlan row_normalize(const TransportPlan& plan) {
  TransportPlan out = plan;
  for (Eigen::Index i = 0; i < plan.values.rows(); ++i) {
    const double s = plan.values.row(i).sum();
    if (!(s > 0.0)) {
      throw DegeneratePlanError("row_normalize: row " + std::to_string(i) +
                                " has no mass (collapsed coupling)");
    }
    out.values.row(i) /= s;
  }
  return out;
}

Matrix barycentric_map(const TransportPlan& plan_normalized, const Matrix& target) {
  const Matrix& p = plan_normalized.values;
  if (p.cols() != target.rows()) {
    throw InputError("barycentric_map: plan columns (" + std::to_string(p.cols()) +
                     ") do not match target rows (" + std::to_string(target.rows()) + ")");
  }
  return p * target;
}

}  // namespace fsqs
