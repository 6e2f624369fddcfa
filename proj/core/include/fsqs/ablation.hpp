#pragma once

#include <string>
#include <vector>

#include "fsqs/eval.hpp"
#include "fsqs/training.hpp"

namespace fsqs {

/// One cell of the ablation grid: which baseline, where OT applies, which
/// normalization, how the backbone was trained, and whether evaluation tasks
/// carry a support-query shift. Training always happens on shifted tasks;
/// the shifted flag only changes evaluation.
struct AblationCell {
  LearnerKind base = LearnerKind::ProtoNet;
  OtUsage ot = OtUsage::Never;
  BnMode bn = BnMode::Conventional;
  TrainRegime regime = TrainRegime::Episodic;
  bool shifted = true;
};

/// Full grid per base learner: episodic x {never, test, train} and
/// erm x {never, test} (under ERM there is no episodic loss to put OT into,
/// so train-time OT degenerates to test-time), each crossed with both BN
/// modes and both shift settings.
std::vector<AblationCell> default_ablation_grid(
    const std::vector<LearnerKind>& bases = {LearnerKind::ProtoNet});

struct AblationSettings {
  EpisodeConfig episode;  // shifted flag overridden per cell
  int eval_episodes = 1000;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  TrainConfig train;  // budgets; learner/bn/regime overridden per cell
  BackboneConfig backbone;
  SinkhornConfig sinkhorn;
  int jobs = 1;
};

struct AblationOutcome {
  AblationCell cell;
  bool ok = false;
  EvalReport report;
  std::string error;
};

/// Trains every distinct checkpoint the grid needs (one per seed and per
/// (base, regime, bn, ot-in-training-loss) combination) and evaluates each
/// cell on the test part. Every seed sees the same evaluation episode
/// stream across cells, so cell comparisons are paired. A failing cell is
/// reported in its outcome; the other cells still run.
std::vector<AblationOutcome> run_ablation(const GridDataset& ds, const SplitSpec& split,
                                          const AblationSettings& settings,
                                          const std::vector<AblationCell>& grid);

std::string ot_name(OtUsage u);
std::string bn_name(BnMode m);
std::string regime_name(TrainRegime r);
std::string learner_name(LearnerKind k);

/// One row per cell, flat CSV suitable for table regeneration.
void write_ablation_csv(const std::vector<AblationOutcome>& outcomes, const std::string& path);
void write_ablation_json(const std::vector<AblationOutcome>& outcomes, const std::string& path);

}  // namespace fsqs
