#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fsqs/backbone.hpp"
#include "fsqs/data.hpp"
#include "fsqs/learners.hpp"

namespace fsqs {

/// Embeds one raw episode. Transductive mode forwards the support-union-query
/// concatenation so batch statistics couple the two sets; Conventional mode
/// forwards them separately through the fixed running-statistics map.
EmbeddedEpisode embed_episode(const BackboneParams& params, const Episode& episode, BnMode mode);

/// Fraction of query rows whose posterior argmax equals the true label.
/// Ties resolve to the lowest class index.
double episode_accuracy(const Matrix& posterior, const std::vector<int>& labels);

struct EvalConfig {
  EpisodeConfig episode;
  int n_episodes = 1000;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  int jobs = 1;
};

struct EvalReport {
  std::string learner_name;  // base learner ("protonet", "matchingnet")
  OtUsage ot = OtUsage::Never;
  BnMode bn = BnMode::Conventional;
  std::string regime;  // training regime of the checkpoint, informational
  bool shifted = true;
  int n_way = 0, k_shot = 0, q_per_class = 0;
  int episodes_per_seed = 0;
  std::vector<std::uint64_t> seeds;
  double mean_accuracy = 0.0;
  double ci95_half_width = 0.0;  // 1.96 * s / sqrt(n) over all episodes
  std::vector<double> per_seed_mean;
  std::vector<double> per_episode_accuracy;  // seeds concatenated, CI is recomputable
};

/// Posterior producer, injectable for testing.
using PosteriorFn = std::function<Matrix(const EmbeddedEpisode&)>;

/// Per-episode accuracies for one seed. Episode e is drawn with
/// derive_seed(seed, e), so results are independent of jobs and of
/// evaluation order.
std::vector<double> evaluate_episodes(const PosteriorFn& fn, const BackboneParams& params,
                                      BnMode bn, const GridDataset& ds, const SplitSpec& split,
                                      SplitPart part, const EpisodeConfig& episode,
                                      int n_episodes, std::uint64_t seed, int jobs = 1);

EvalReport evaluate(const BackboneParams& params, const LearnerSpec& spec, BnMode bn,
                    const GridDataset& ds, const SplitSpec& split, SplitPart part,
                    const EvalConfig& config);

EvalReport evaluate_with(const PosteriorFn& fn, const std::string& learner_name,
                         const BackboneParams& params, BnMode bn, const GridDataset& ds,
                         const SplitSpec& split, SplitPart part, const EvalConfig& config);

void write_report_json(const EvalReport& report, const std::string& path);

}  // namespace fsqs
