#include "fsqs/eval.hpp"

#include <cmath>
#include <fstream>
#include <thread>

#include "json.hpp"

#include "fsqs/error.hpp"
#include "fsqs/rng.hpp"

namespace fsqs {

EmbeddedEpisode embed_episode(const BackboneParams& params, const Episode& episode, BnMode mode) {
  EmbeddedEpisode out;
  out.support_labels = episode.support_labels;
  out.query_labels = episode.query_labels;
  out.n_classes = static_cast<int>(episode.class_ids.size());
  if (mode == BnMode::Transductive) {
    const auto n_s = episode.support_features.rows();
    const auto n_q = episode.query_features.rows();
    Matrix joint(n_s + n_q, episode.support_features.cols());
    joint.topRows(n_s) = episode.support_features;
    joint.bottomRows(n_q) = episode.query_features;
    const Matrix z = embed(params, joint, mode);
    out.support = z.topRows(n_s);
    out.query = z.bottomRows(n_q);
  } else {
    out.support = embed(params, episode.support_features, mode);
    out.query = embed(params, episode.query_features, mode);
  }
  return out;
}

double episode_accuracy(const Matrix& posterior, const std::vector<int>& labels) {
  if (posterior.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw InputError("episode_accuracy: label count mismatch");
  }
  int correct = 0;
  for (Eigen::Index r = 0; r < posterior.rows(); ++r) {
    int best = 0;
    for (Eigen::Index k = 1; k < posterior.cols(); ++k) {
      if (posterior(r, k) > posterior(r, best)) best = static_cast<int>(k);
    }
    if (best == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(posterior.rows());
}

std::vector<double> evaluate_episodes(const PosteriorFn& fn, const BackboneParams& params,
                                      BnMode bn, const GridDataset& ds, const SplitSpec& split,
                                      SplitPart part, const EpisodeConfig& episode,
                                      int n_episodes, std::uint64_t seed, int jobs) {
  if (n_episodes < 1) throw InputError("evaluate: n_episodes must be >= 1");
  std::vector<double> acc(static_cast<std::size_t>(n_episodes));

  auto worker = [&](int begin, int end) {
    for (int e = begin; e < end; ++e) {
      const Episode ep =
          sample_episode(ds, split, part, episode, derive_seed(seed, static_cast<std::uint64_t>(e)));
      const EmbeddedEpisode embedded = embed_episode(params, ep, bn);
      acc[static_cast<std::size_t>(e)] = episode_accuracy(fn(embedded), embedded.query_labels);
    }
  };

  const int n_threads = std::max(1, std::min(jobs, n_episodes));
  if (n_threads == 1) {
    worker(0, n_episodes);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n_episodes + n_threads - 1) / n_threads;
    for (int t = 0; t < n_threads; ++t) {
      const int begin = t * chunk;
      const int end = std::min(n_episodes, begin + chunk);
      if (begin < end) pool.emplace_back(worker, begin, end);
    }
    for (auto& th : pool) th.join();
  }
  return acc;
}

namespace {

void fill_statistics(EvalReport& report) {
  const auto& a = report.per_episode_accuracy;
  const auto n = static_cast<double>(a.size());
  double mean = 0.0;
  for (double x : a) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : a) ss += (x - mean) * (x - mean);
  const double sd = a.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  report.mean_accuracy = mean;
  report.ci95_half_width = 1.96 * sd / std::sqrt(n);
}

}  // namespace

EvalReport evaluate_with(const PosteriorFn& fn, const std::string& learner_name,
                         const BackboneParams& params, BnMode bn, const GridDataset& ds,
                         const SplitSpec& split, SplitPart part, const EvalConfig& config) {
  if (config.seeds.empty()) throw InputError("evaluate: need at least one seed");
  EvalReport report;
  report.learner_name = learner_name;
  report.bn = bn;
  report.shifted = config.episode.shifted;
  report.n_way = config.episode.n_way;
  report.k_shot = config.episode.k_shot;
  report.q_per_class = config.episode.q_per_class;
  report.episodes_per_seed = config.n_episodes;
  report.seeds = config.seeds;

  for (std::uint64_t seed : config.seeds) {
    const std::vector<double> acc = evaluate_episodes(fn, params, bn, ds, split, part,
                                                      config.episode, config.n_episodes, seed,
                                                      config.jobs);
    double mean = 0.0;
    for (double x : acc) mean += x;
    report.per_seed_mean.push_back(mean / static_cast<double>(acc.size()));
    report.per_episode_accuracy.insert(report.per_episode_accuracy.end(), acc.begin(), acc.end());
  }
  fill_statistics(report);
  return report;
}

EvalReport evaluate(const BackboneParams& params, const LearnerSpec& spec, BnMode bn,
                    const GridDataset& ds, const SplitSpec& split, SplitPart part,
                    const EvalConfig& config) {
  EvalReport report = evaluate_with(
      [&spec](const EmbeddedEpisode& ep) { return posterior(spec, ep); },
      spec.base == LearnerKind::MatchingNet ? "matchingnet" : "protonet", params, bn, ds, split,
      part, config);
  report.ot = spec.ot;
  return report;
}

void write_report_json(const EvalReport& report, const std::string& path) {
  nlohmann::json j;
  j["learner"] = report.learner_name;
  j["ot"] = report.ot == OtUsage::Never ? "never"
            : report.ot == OtUsage::TestOnly ? "test"
                                             : "train";
  j["bn"] = report.bn == BnMode::Conventional ? "cbn" : "tbn";
  j["regime"] = report.regime;
  j["shifted"] = report.shifted;
  j["n_way"] = report.n_way;
  j["k_shot"] = report.k_shot;
  j["q_per_class"] = report.q_per_class;
  j["episodes_per_seed"] = report.episodes_per_seed;
  j["seeds"] = report.seeds;
  j["mean_accuracy"] = report.mean_accuracy;
  j["ci95_half_width"] = report.ci95_half_width;
  j["per_seed_mean"] = report.per_seed_mean;
  j["per_episode_accuracy"] = report.per_episode_accuracy;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace fsqs
