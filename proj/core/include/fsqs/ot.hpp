#pragma once

#include <utility>

#include "fsqs/types.hpp"

namespace fsqs {

enum class CostMetric {
  SquaredEuclidean,  // default pairing cost
  Euclidean,
};

/// Coupling between a source and a target point cloud. Row sums follow the
/// source marginals and column sums the target marginals up to
/// `feasibility_error` (the max violation over all rows and columns).
struct TransportPlan {
  Matrix values;                   // n_s x n_q, entries >= 0
  double feasibility_error = 0.0;  // inf-norm marginal violation
  bool converged = true;           // false: iteration cap hit before tol
  int iterations = 0;
};

struct MarginalWeights {
  Vector source;  // length n_s, nonnegative, sums to 1
  Vector target;  // length n_q, nonnegative, sums to 1
};

MarginalWeights uniform_marginals(Eigen::Index n_source, Eigen::Index n_target);

struct SinkhornConfig {
  double epsilon = 0.05;  // entropic regularization strength
  int max_iters = 1000;
  double tol = 1e-9;  // marginal inf-norm stopping tolerance
};

/// Pairwise cost between every source row and every target row.
/// C(i,j) = ||source_i - target_j||^2 for the default metric.
Matrix cost_matrix(const Matrix& source, const Matrix& target,
                   CostMetric metric = CostMetric::SquaredEuclidean);

/// Entropically regularized transport plan via log-domain Sinkhorn-Knopp.
/// Iterates dual potential updates with max-subtracted log-sum-exp, so the
/// solve stays stable down to epsilon ~ 1e-3 and beyond. Stops once the
/// plan's marginal violation drops below config.tol; if the iteration cap is
/// reached first, the plan is still returned with converged=false and the
/// achieved error recorded.
TransportPlan sinkhorn(const Matrix& cost, const MarginalWeights& marginals,
                       const SinkhornConfig& config = {});

/// Exact optimal transport for square costs with uniform marginals, by
/// exhaustive enumeration of all permutation couplings. Each coupling is a
/// permutation matrix scaled by 1/n. Intended as a ground-truth oracle;
/// refuses n > 8.
std::pair<TransportPlan, double> exact_ot_oracle(const Matrix& cost);

/// Rescale each row of the plan to sum to 1. A row with no mass means the
/// coupling collapsed and is reported as an error, never silently patched.
TransportPlan row_normalize(const TransportPlan& plan);

/// Barycenter mapping: row i of the result is the plan-weighted average of
/// target rows. Requires a row-normalized plan, so each output row is a
/// convex combination of the target rows.
Matrix barycentric_map(const TransportPlan& plan_normalized, const Matrix& target);

}  // namespace fsqs
