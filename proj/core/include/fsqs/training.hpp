#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsqs/backbone.hpp"
#include "fsqs/data.hpp"
#include "fsqs/eval.hpp"
#include "fsqs/learners.hpp"

namespace fsqs {

enum class TrainRegime { Episodic, Erm };

struct TrainConfig {
  TrainRegime regime = TrainRegime::Episodic;
  int steps = 2000;  // episodes, or ERM minibatch steps
  double lr = 0.01;
  EpisodeConfig episode;  // training episodes are shifted FSQS tasks
  LearnerSpec learner;
  BnMode bn = BnMode::Conventional;
  int val_period = 100;
  int val_episodes = 100;
  int erm_batch_size = 64;
  std::uint64_t seed = 1;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  bool has_val = false;
  double val_accuracy = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  double best_val_accuracy = 0.0;
  int best_step = 0;
};

/// JSON-lines: one {"step","loss"[,"val_accuracy"]} object per step, then a
/// final {"best_step","best_val_accuracy"} summary line.
void save_train_log(const TrainLog& log, const std::string& path);

struct TrainResult {
  BackboneParams params;  // state at the best recorded validation accuracy
  TrainLog log;
};

/// One gradient step on one episode; returns the loss. Under Transductive BN
/// the support-union-query batch goes through the network jointly; under
/// Conventional BN support and query are forwarded separately. The learner's
/// OT usage decides whether the transported-prototypes head is part of the
/// training loss.
double episodic_train_step(BackboneParams& params, const Episode& episode,
                           const LearnerSpec& learner, BnMode bn, double lr);

/// Episodic meta-training on shifted tasks from the train part, with
/// periodic few-shot validation on the val part; returns the checkpoint with
/// the best validation accuracy.
TrainResult train_episodic(const GridDataset& ds, const SplitSpec& split,
                           BackboneParams initial, const TrainConfig& config);

/// Standard ERM: minibatch cross-entropy over all train-part items with a
/// linear classification head over the train classes. The head is discarded;
/// only the backbone is returned. Validation is the same few-shot protocol
/// as episodic training, so best-checkpoint selection is comparable.
TrainResult train_erm(const GridDataset& ds, const SplitSpec& split, BackboneParams initial,
                      const TrainConfig& config);

/// Dispatch on config.regime.
TrainResult train(const GridDataset& ds, const SplitSpec& split, BackboneParams initial,
                  const TrainConfig& config);

}  // namespace fsqs
