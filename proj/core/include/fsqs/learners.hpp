#pragma once

#include <utility>
#include <vector>

#include "fsqs/ot.hpp"
#include "fsqs/types.hpp"

namespace fsqs {

/// When optimal transport participates in an experiment.
enum class OtUsage {
  Never,         // plain baseline
  TestOnly,      // backbone trained without OT, transported head at eval
  TrainAndTest,  // transported head inside the episodic training loss too
};

enum class LearnerKind { ProtoNet, MatchingNet };

struct LearnerSpec {
  LearnerKind base = LearnerKind::ProtoNet;
  OtUsage ot = OtUsage::Never;
  SinkhornConfig sinkhorn;
  bool squared_distance = true;  // distance head of the prototype softmax

  bool ot_at_eval() const { return ot != OtUsage::Never; }
  bool ot_at_train() const { return ot == OtUsage::TrainAndTest; }
};

/// One episode after the backbone: embeddings plus labels. Query labels ride
/// along for scoring only; no learner reads them.
struct EmbeddedEpisode {
  Matrix support;                  // n_s x d
  std::vector<int> support_labels; // values in [0, n_classes)
  Matrix query;                    // n_q x d
  std::vector<int> query_labels;   // scoring only
  int n_classes = 0;
};

/// Row k is the mean of support embeddings labeled k. Every class must have
/// at least one instance.
Matrix compute_prototypes(const Matrix& embeddings, const std::vector<int>& labels,
                          int n_classes);

/// Softmax over classes of the negated (squared) euclidean distance from
/// each query row to each prototype.
Matrix protonet_posterior(const Matrix& prototypes, const Matrix& queries, bool squared = true);

/// Cosine attention over support instances, summed per class. Rows sum to 1.
Matrix matchingnet_posterior(const Matrix& support, const std::vector<int>& labels,
                             int n_classes, const Matrix& queries);

/// Moves each support embedding to the plan-weighted barycenter of the query
/// embeddings: cost -> sinkhorn -> row-normalize -> barycentric map.
/// Returns the transported support and the (unnormalized) plan.
std::pair<Matrix, TransportPlan> transport_support(const Matrix& support, const Matrix& queries,
                                                   const SinkhornConfig& config);

/// The transported-prototypes head: prototypes of the transported support,
/// then the prototype softmax against the original queries.
std::pair<Matrix, TransportPlan> transported_prototypes_posterior(
    const Matrix& support, const std::vector<int>& labels, int n_classes, const Matrix& queries,
    const SinkhornConfig& config, bool squared = true);

/// Posterior for an embedded episode, with the transport step applied first
/// whenever the learner's OT usage is active at evaluation.
Matrix posterior(const LearnerSpec& spec, const EmbeddedEpisode& episode);

struct EpisodeLossResult {
  double value = 0.0;
  bool clamped = false;  // some true-label probability hit the 1e-12 floor
};

/// Mean negative log-likelihood of the true query labels.
EpisodeLossResult episode_loss(const Matrix& posterior, const std::vector<int>& labels);

/// Loss plus gradients w.r.t. the embeddings, for manual backprop through
/// the backbone. The loss value equals episode_loss of the returned
/// posterior (computed in logit space, so it is exact even when
/// probabilities underflow).
struct HeadGradients {
  double loss = 0.0;
  Matrix posterior;
  Matrix d_support;  // n_s x d
  Matrix d_query;    // n_q x d
};

HeadGradients protonet_loss_grads(const Matrix& support, const std::vector<int>& support_labels,
                                  int n_classes, const Matrix& queries,
                                  const std::vector<int>& query_labels);

HeadGradients matchingnet_loss_grads(const Matrix& support, const std::vector<int>& support_labels,
                                     int n_classes, const Matrix& queries,
                                     const std::vector<int>& query_labels);

/// Transported-prototypes training loss. The transport plan is treated as a
/// constant of the backward pass (envelope-style stop-gradient): gradients
/// flow through the barycentric product and the distance head, not through
/// the Sinkhorn iterations. Support embeddings therefore receive no
/// gradient from this head.
struct TpHeadGradients : HeadGradients {
  TransportPlan plan;
};

TpHeadGradients tp_loss_grads(const Matrix& support, const std::vector<int>& support_labels,
                              int n_classes, const Matrix& queries,
                              const std::vector<int>& query_labels,
                              const SinkhornConfig& config);

}  // namespace fsqs
