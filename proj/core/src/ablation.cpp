#include "fsqs/ablation.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <tuple>

#include "json.hpp"

#include "fsqs/error.hpp"
#include "fsqs/rng.hpp"

namespace fsqs {

namespace {

constexpr std::uint64_t kInitStream = 0xB0;
constexpr std::uint64_t kEvalStream = 0xE7A1;

}  // namespace

std::string ot_name(OtUsage u) {
  switch (u) {
    case OtUsage::Never: return "never";
    case OtUsage::TestOnly: return "test";
    default: return "train";
  }
}

std::string bn_name(BnMode m) { return m == BnMode::Conventional ? "cbn" : "tbn"; }

std::string regime_name(TrainRegime r) { return r == TrainRegime::Episodic ? "episodic" : "erm"; }

std::string learner_name(LearnerKind k) {
  return k == LearnerKind::MatchingNet ? "matchingnet" : "protonet";
}

std::vector<AblationCell> default_ablation_grid(const std::vector<LearnerKind>& bases) {
  std::vector<AblationCell> grid;
  for (LearnerKind base : bases) {
    for (TrainRegime regime : {TrainRegime::Episodic, TrainRegime::Erm}) {
      std::vector<OtUsage> ots = {OtUsage::Never, OtUsage::TestOnly};
      if (regime == TrainRegime::Episodic) ots.push_back(OtUsage::TrainAndTest);
      for (OtUsage ot : ots) {
        for (BnMode bn : {BnMode::Conventional, BnMode::Transductive}) {
          for (bool shifted : {true, false}) {
            grid.push_back(AblationCell{base, ot, bn, regime, shifted});
          }
        }
      }
    }
  }
  return grid;
}

std::vector<AblationOutcome> run_ablation(const GridDataset& ds, const SplitSpec& split,
                                          const AblationSettings& settings,
                                          const std::vector<AblationCell>& grid) {
  // (base, regime, bn, ot-in-training, seed) -> trained backbone.
  using CheckpointKey = std::tuple<int, int, int, bool, std::uint64_t>;
  std::map<CheckpointKey, BackboneParams> checkpoints;

  auto trained_params = [&](const AblationCell& cell, std::uint64_t seed) -> const BackboneParams& {
    const bool ot_in_training =
        cell.regime == TrainRegime::Episodic && cell.ot == OtUsage::TrainAndTest;
    const CheckpointKey key{static_cast<int>(cell.base), static_cast<int>(cell.regime),
                            static_cast<int>(cell.bn), ot_in_training, seed};
    auto it = checkpoints.find(key);
    if (it != checkpoints.end()) return it->second;

    TrainConfig cfg = settings.train;
    cfg.regime = cell.regime;
    cfg.bn = cell.bn;
    cfg.episode = settings.episode;
    cfg.episode.shifted = true;  // training tasks always carry the shift
    cfg.learner.base = cell.base;
    cfg.learner.ot = ot_in_training ? OtUsage::TrainAndTest : OtUsage::Never;
    cfg.learner.sinkhorn = settings.sinkhorn;
    cfg.seed = seed;

    BackboneParams init = init_backbone(settings.backbone, derive_seed(seed, kInitStream));
    TrainResult result = train(ds, split, std::move(init), cfg);
    return checkpoints.emplace(key, std::move(result.params)).first->second;
  };

  std::vector<AblationOutcome> outcomes;
  for (const AblationCell& cell : grid) {
    AblationOutcome outcome;
    outcome.cell = cell;
    try {
      LearnerSpec spec;
      spec.base = cell.base;
      spec.ot = cell.ot;
      spec.sinkhorn = settings.sinkhorn;

      EvalReport report;
      report.learner_name = learner_name(cell.base);
      report.ot = cell.ot;
      report.bn = cell.bn;
      report.regime = regime_name(cell.regime);
      report.shifted = cell.shifted;
      report.n_way = settings.episode.n_way;
      report.k_shot = settings.episode.k_shot;
      report.q_per_class = settings.episode.q_per_class;
      report.episodes_per_seed = settings.eval_episodes;
      report.seeds = settings.seeds;

      EpisodeConfig eval_episode = settings.episode;
      eval_episode.shifted = cell.shifted;

      for (std::uint64_t seed : settings.seeds) {
        const BackboneParams& params = trained_params(cell, seed);
        const PosteriorFn fn = [&spec](const EmbeddedEpisode& ep) { return posterior(spec, ep); };
        const std::vector<double> acc = evaluate_episodes(
            fn, params, cell.bn, ds, split, SplitPart::Test, eval_episode,
            settings.eval_episodes, derive_seed(seed, kEvalStream), settings.jobs);
        double mean = 0.0;
        for (double a : acc) mean += a;
        report.per_seed_mean.push_back(mean / static_cast<double>(acc.size()));
        report.per_episode_accuracy.insert(report.per_episode_accuracy.end(), acc.begin(),
                                           acc.end());
      }
      {
        // Pooled mean and across-episode CI, the same recipe as evaluate().
        const auto& a = report.per_episode_accuracy;
        const auto n = static_cast<double>(a.size());
        double mean = 0.0;
        for (double x : a) mean += x;
        mean /= n;
        double ss = 0.0;
        for (double x : a) ss += (x - mean) * (x - mean);
        report.mean_accuracy = mean;
        report.ci95_half_width =
            a.size() > 1 ? 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
      }
      outcome.report = std::move(report);
      outcome.ok = true;
    } catch (const std::exception& e) {
      outcome.ok = false;
      outcome.error = e.what();
    }
    outcomes.push_back(std::move(outcome));
  }
  return outcomes;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& values, const F& fmt, char sep = ';') {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += fmt(values[i]);
  }
  return out;
}

}  // namespace

void write_ablation_csv(const std::vector<AblationOutcome>& outcomes, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "learner,ot,bn,regime,shifted,n_way,k_shot,q_per_class,episodes_per_seed,seeds,"
         "mean_accuracy,ci95,per_seed_means,status,error\n";
  for (const auto& o : outcomes) {
    const auto& c = o.cell;
    out << learner_name(c.base) << ',' << ot_name(c.ot) << ',' << bn_name(c.bn) << ','
        << regime_name(c.regime) << ',' << (c.shifted ? "shifted" : "unshifted") << ',';
    if (o.ok) {
      const auto& r = o.report;
      out << r.n_way << ',' << r.k_shot << ',' << r.q_per_class << ',' << r.episodes_per_seed
          << ',' << join(r.seeds, [](std::uint64_t s) { return std::to_string(s); }) << ','
          << fmt_double(r.mean_accuracy) << ',' << fmt_double(r.ci95_half_width) << ','
          << join(r.per_seed_mean, fmt_double) << ",ok,\n";
    } else {
      std::string msg = o.error;
      for (char& ch : msg) {
        if (ch == ',' || ch == '\n') ch = ';';
      }
      out << ",,,,,,,,failed," << msg << "\n";
    }
  }
  if (!out) throw IoError("failed writing " + path);
}

void write_ablation_json(const std::vector<AblationOutcome>& outcomes, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& o : outcomes) {
    nlohmann::json j;
    j["learner"] = learner_name(o.cell.base);
    j["ot"] = ot_name(o.cell.ot);
    j["bn"] = bn_name(o.cell.bn);
    j["regime"] = regime_name(o.cell.regime);
    j["shifted"] = o.cell.shifted;
    j["status"] = o.ok ? "ok" : "failed";
    if (o.ok) {
      j["mean_accuracy"] = o.report.mean_accuracy;
      j["ci95_half_width"] = o.report.ci95_half_width;
      j["per_seed_mean"] = o.report.per_seed_mean;
      j["episodes_per_seed"] = o.report.episodes_per_seed;
      j["seeds"] = o.report.seeds;
    } else {
      j["error"] = o.error;
    }
    arr.push_back(std::move(j));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << arr.dump(2) << "\n";
}

}  // namespace fsqs
