#include "fsqs/learners.hpp"

#include <cmath>
#include <string>

#include "fsqs/error.hpp"

namespace fsqs {

namespace {

constexpr double kProbFloor = 1e-12;

void check_labels(const std::vector<int>& labels, Eigen::Index n_rows, int n_classes,
                  const char* what) {
  if (static_cast<Eigen::Index>(labels.size()) != n_rows) {
    throw InputError(std::string(what) + ": label count does not match embedding rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= n_classes) {
      throw InputError(std::string(what) + ": label " + std::to_string(y) + " out of range");
    }
  }
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// -||q_j - c_k||^2 (or unsquared) for all query/prototype pairs.
Matrix negative_distance_logits(const Matrix& prototypes, const Matrix& queries, bool squared) {
  Matrix logits(queries.rows(), prototypes.rows());
  for (Eigen::Index j = 0; j < queries.rows(); ++j) {
    for (Eigen::Index k = 0; k < prototypes.rows(); ++k) {
      const double d2 = (queries.row(j) - prototypes.row(k)).squaredNorm();
      logits(j, k) = squared ? -d2 : -std::sqrt(d2);
    }
  }
  return logits;
}

// Mean NLL straight from logits: -logit_y + logsumexp(logits). Stays exact
// when softmax probabilities underflow.
double nll_from_logits(const Matrix& logits, const std::vector<int>& labels) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    total += lse - logits(r, labels[static_cast<std::size_t>(r)]);
  }
  return total / static_cast<double>(logits.rows());
}

// Class-averaging matrix M (n_classes x n): M(k,i) = [labels_i == k] / count_k.
Matrix class_mean_matrix(const std::vector<int>& labels, int n_classes, Eigen::Index n) {
  Matrix m = Matrix::Zero(n_classes, n);
  std::vector<int> counts(static_cast<std::size_t>(n_classes), 0);
  for (Eigen::Index i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(labels[i])];
  for (int k = 0; k < n_classes; ++k) {
    if (counts[static_cast<std::size_t>(k)] == 0) {
      throw InputError("class " + std::to_string(k) + " has no support instances");
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = labels[static_cast<std::size_t>(i)];
    m(k, i) = 1.0 / counts[static_cast<std::size_t>(k)];
  }
  return m;
}

}  // namespace

Matrix compute_prototypes(const Matrix& embeddings, const std::vector<int>& labels,
                          int n_classes) {
  if (n_classes < 1) throw InputError("compute_prototypes: need at least one class");
  check_labels(labels, embeddings.rows(), n_classes, "compute_prototypes");
  return class_mean_matrix(labels, n_classes, embeddings.rows()) * embeddings;
}

Matrix protonet_posterior(const Matrix& prototypes, const Matrix& queries, bool squared) {
  if (prototypes.cols() != queries.cols()) {
    throw InputError("protonet_posterior: feature dimensions differ");
  }
  return softmax_rows(negative_distance_logits(prototypes, queries, squared));
}

Matrix matchingnet_posterior(const Matrix& support, const std::vector<int>& labels,
                             int n_classes, const Matrix& queries) {
  if (support.rows() < 1) throw InputError("matchingnet_posterior: empty support");
  if (support.cols() != queries.cols()) {
    throw InputError("matchingnet_posterior: feature dimensions differ");
  }
  check_labels(labels, support.rows(), n_classes, "matchingnet_posterior");

  const Vector s_norm = support.rowwise().norm();
  const Vector q_norm = queries.rowwise().norm();
  if ((s_norm.array() == 0.0).any() || (q_norm.array() == 0.0).any()) {
    throw InputError("matchingnet_posterior: zero-norm embedding, cosine undefined");
  }

  const Matrix cosine = (queries.array().colwise() / q_norm.array()).matrix() *
                        (support.array().colwise() / s_norm.array()).matrix().transpose();
  const Matrix attention = softmax_rows(cosine);  // n_q x n_s

  Matrix probs = Matrix::Zero(queries.rows(), n_classes);
  for (Eigen::Index i = 0; i < support.rows(); ++i) {
    probs.col(labels[static_cast<std::size_t>(i)]) += attention.col(i);
  }
  for (Eigen::Index r = 0; r < probs.rows(); ++r) probs.row(r) /= probs.row(r).sum();
  return probs;
}

std::pair<Matrix, TransportPlan> transport_support(const Matrix& support, const Matrix& queries,
                                                   const SinkhornConfig& config) {
  const Matrix cost = cost_matrix(support, queries);
  TransportPlan plan = sinkhorn(cost, uniform_marginals(support.rows(), queries.rows()), config);
  const TransportPlan normalized = row_normalize(plan);
  return {barycentric_map(normalized, queries), std::move(plan)};
}

std::pair<Matrix, TransportPlan> transported_prototypes_posterior(
    const Matrix& support, const std::vector<int>& labels, int n_classes, const Matrix& queries,
    const SinkhornConfig& config, bool squared) {
  auto [transported, plan] = transport_support(support, queries, config);
  const Matrix prototypes = compute_prototypes(transported, labels, n_classes);
  return {protonet_posterior(prototypes, queries, squared), std::move(plan)};
}

Matrix posterior(const LearnerSpec& spec, const EmbeddedEpisode& ep) {
  check_labels(ep.support_labels, ep.support.rows(), ep.n_classes, "posterior");
  Matrix support = ep.support;
  if (spec.ot_at_eval()) {
    support = transport_support(support, ep.query, spec.sinkhorn).first;
  }
  if (spec.base == LearnerKind::MatchingNet) {
    return matchingnet_posterior(support, ep.support_labels, ep.n_classes, ep.query);
  }
  const Matrix prototypes = compute_prototypes(support, ep.support_labels, ep.n_classes);
  return protonet_posterior(prototypes, ep.query, spec.squared_distance);
}

EpisodeLossResult episode_loss(const Matrix& posterior, const std::vector<int>& labels) {
  check_labels(labels, posterior.rows(), static_cast<int>(posterior.cols()), "episode_loss");
  EpisodeLossResult res;
  double total = 0.0;
  for (Eigen::Index r = 0; r < posterior.rows(); ++r) {
    double p = posterior(r, labels[static_cast<std::size_t>(r)]);
    if (p < kProbFloor) {
      p = kProbFloor;
      res.clamped = true;
    }
    total -= std::log(p);
  }
  res.value = total / static_cast<double>(posterior.rows());
  return res;
}

namespace {

// Shared tail of the prototype-softmax heads. Given prototypes C = M * B for
// some base embedding B, returns loss, posterior, dL/dC and dL/dQ (the
// direct query path through the distance logits).
struct ProtoHeadCore {
  double loss;
  Matrix posterior;
  Matrix d_prototypes;   // |C| x d
  Matrix d_query_direct; // n_q x d
};

ProtoHeadCore proto_head_core(const Matrix& prototypes, const Matrix& queries,
                              const std::vector<int>& query_labels) {
  const auto n_q = queries.rows();
  const int n_classes = static_cast<int>(prototypes.rows());
  check_labels(query_labels, n_q, n_classes, "proto head");

  const Matrix logits = negative_distance_logits(prototypes, queries, /*squared=*/true);
  ProtoHeadCore core;
  core.loss = nll_from_logits(logits, query_labels);
  core.posterior = softmax_rows(logits);

  // dLoss/dlogits = (posterior - onehot) / n_q, then
  // dlogit_{jk}/dq_j = -2 (q_j - c_k)   and   dlogit_{jk}/dc_k = 2 (q_j - c_k).
  Matrix g = core.posterior;
  for (Eigen::Index j = 0; j < n_q; ++j) g(j, query_labels[static_cast<std::size_t>(j)]) -= 1.0;
  g /= static_cast<double>(n_q);

  const Vector row_sum = g.rowwise().sum();  // == 0 analytically, kept for exactness
  const Vector col_sum = g.colwise().sum();
  core.d_query_direct =
      -2.0 * ((queries.array().colwise() * row_sum.array()).matrix() - g * prototypes);
  core.d_prototypes =
      2.0 * (g.transpose() * queries - (prototypes.array().colwise() * col_sum.array()).matrix());
  return core;
}

}  // namespace

HeadGradients protonet_loss_grads(const Matrix& support, const std::vector<int>& support_labels,
                                  int n_classes, const Matrix& queries,
                                  const std::vector<int>& query_labels) {
  check_labels(support_labels, support.rows(), n_classes, "protonet_loss_grads");
  const Matrix m = class_mean_matrix(support_labels, n_classes, support.rows());
  const Matrix prototypes = m * support;
  ProtoHeadCore core = proto_head_core(prototypes, queries, query_labels);

  HeadGradients out;
  out.loss = core.loss;
  out.posterior = std::move(core.posterior);
  out.d_support = m.transpose() * core.d_prototypes;
  out.d_query = std::move(core.d_query_direct);
  return out;
}

TpHeadGradients tp_loss_grads(const Matrix& support, const std::vector<int>& support_labels,
                              int n_classes, const Matrix& queries,
                              const std::vector<int>& query_labels,
                              const SinkhornConfig& config) {
  check_labels(support_labels, support.rows(), n_classes, "tp_loss_grads");
  const Matrix cost = cost_matrix(support, queries);
  TransportPlan plan = sinkhorn(cost, uniform_marginals(support.rows(), queries.rows()), config);
  const Matrix plan_hat = row_normalize(plan).values;  // stop-gradient from here on

  const Matrix transported = plan_hat * queries;
  const Matrix m = class_mean_matrix(support_labels, n_classes, support.rows());
  const Matrix prototypes = m * transported;
  ProtoHeadCore core = proto_head_core(prototypes, queries, query_labels);

  TpHeadGradients out;
  out.loss = core.loss;
  out.posterior = std::move(core.posterior);
  out.plan = std::move(plan);
  // Query embeddings enter twice: directly in the distance head, and through
  // the barycentric product transported = plan_hat * Q.
  const Matrix d_transported = m.transpose() * core.d_prototypes;
  out.d_query = core.d_query_direct + plan_hat.transpose() * d_transported;
  out.d_support = Matrix::Zero(support.rows(), support.cols());
  return out;
}

HeadGradients matchingnet_loss_grads(const Matrix& support, const std::vector<int>& support_labels,
                                     int n_classes, const Matrix& queries,
                                     const std::vector<int>& query_labels) {
  check_labels(support_labels, support.rows(), n_classes, "matchingnet_loss_grads");
  check_labels(query_labels, queries.rows(), n_classes, "matchingnet_loss_grads");
  const auto n_s = support.rows();
  const auto n_q = queries.rows();

  const Vector s_norm = support.rowwise().norm();
  const Vector q_norm = queries.rowwise().norm();
  if ((s_norm.array() == 0.0).any() || (q_norm.array() == 0.0).any()) {
    throw InputError("matchingnet_loss_grads: zero-norm embedding, cosine undefined");
  }
  const Matrix sn = support.array().colwise() / s_norm.array();
  const Matrix qn = queries.array().colwise() / q_norm.array();
  const Matrix cosine = qn * sn.transpose();
  const Matrix attention = softmax_rows(cosine);

  Matrix probs = Matrix::Zero(n_q, n_classes);
  for (Eigen::Index i = 0; i < n_s; ++i) {
    probs.col(support_labels[static_cast<std::size_t>(i)]) += attention.col(i);
  }

  HeadGradients out;
  out.posterior = probs;
  double total = 0.0;
  Matrix d_probs = Matrix::Zero(n_q, n_classes);
  for (Eigen::Index j = 0; j < n_q; ++j) {
    double p = probs(j, query_labels[static_cast<std::size_t>(j)]);
    if (p < kProbFloor) p = kProbFloor;  // flat region of the clamped log
    total -= std::log(p);
    if (probs(j, query_labels[static_cast<std::size_t>(j)]) >= kProbFloor) {
      d_probs(j, query_labels[static_cast<std::size_t>(j)]) = -1.0 / (static_cast<double>(n_q) * p);
    }
  }
  out.loss = total / static_cast<double>(n_q);

  // Back through the per-class sum: dL/da_{ji} = dL/dp_{j, y_i}.
  Matrix d_attention(n_q, n_s);
  for (Eigen::Index i = 0; i < n_s; ++i) {
    d_attention.col(i) = d_probs.col(support_labels[static_cast<std::size_t>(i)]);
  }
  // Softmax backward per query row.
  Matrix d_cosine(n_q, n_s);
  for (Eigen::Index j = 0; j < n_q; ++j) {
    const double dot = attention.row(j).cwiseProduct(d_attention.row(j)).sum();
    d_cosine.row(j) = (attention.row(j).array() * (d_attention.row(j).array() - dot)).matrix();
  }
  // cos_{ji} = qn_j . sn_i; unit-vector backward peels off the radial part.
  const Matrix d_qn = d_cosine * sn;
  const Matrix d_sn = d_cosine.transpose() * qn;
  out.d_query = Matrix(n_q, queries.cols());
  for (Eigen::Index j = 0; j < n_q; ++j) {
    const double radial = qn.row(j).dot(d_qn.row(j));
    out.d_query.row(j) = (d_qn.row(j) - radial * qn.row(j)) / q_norm(j);
  }
  out.d_support = Matrix(n_s, support.cols());
  for (Eigen::Index i = 0; i < n_s; ++i) {
    const double radial = sn.row(i).dot(d_sn.row(i));
    out.d_support.row(i) = (d_sn.row(i) - radial * sn.row(i)) / s_norm(i);
  }
  return out;
}

}  // namespace fsqs
