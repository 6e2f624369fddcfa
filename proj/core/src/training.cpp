#include "fsqs/training.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"

#include "fsqs/error.hpp"
#include "fsqs/rng.hpp"

namespace fsqs {

namespace {

constexpr std::uint64_t kEpisodeStream = 0x100000;
constexpr std::uint64_t kValStream = 0x200000;
constexpr std::uint64_t kErmEpochStream = 0x300000;
constexpr std::uint64_t kHeadInitStream = 0x4EAD;

HeadGradients head_loss_grads(const LearnerSpec& learner, const Matrix& s_emb,
                              const std::vector<int>& s_labels, int n_classes,
                              const Matrix& q_emb, const std::vector<int>& q_labels) {
  if (!learner.squared_distance) {
    throw InputError("training: only the squared-distance head is differentiable");
  }
  if (learner.ot_at_train()) {
    return tp_loss_grads(s_emb, s_labels, n_classes, q_emb, q_labels, learner.sinkhorn);
  }
  if (learner.base == LearnerKind::MatchingNet) {
    return matchingnet_loss_grads(s_emb, s_labels, n_classes, q_emb, q_labels);
  }
  return protonet_loss_grads(s_emb, s_labels, n_classes, q_emb, q_labels);
}

double validation_accuracy(const BackboneParams& params, const GridDataset& ds,
                           const SplitSpec& split, const TrainConfig& cfg, int step) {
  const LearnerSpec& spec = cfg.learner;
  const PosteriorFn fn = [&spec](const EmbeddedEpisode& ep) { return posterior(spec, ep); };
  const std::vector<double> acc = evaluate_episodes(
      fn, params, cfg.bn, ds, split, SplitPart::Val, cfg.episode, cfg.val_episodes,
      derive_seed(cfg.seed, kValStream + static_cast<std::uint64_t>(step)), /*jobs=*/1);
  double mean = 0.0;
  for (double a : acc) mean += a;
  return mean / static_cast<double>(acc.size());
}

void record_validation(TrainResult& result, const BackboneParams& params, double val_acc,
                       int step) {
  result.log.entries.back().has_val = true;
  result.log.entries.back().val_accuracy = val_acc;
  if (result.log.best_step == 0 || val_acc > result.log.best_val_accuracy) {
    result.log.best_val_accuracy = val_acc;
    result.log.best_step = step;
    result.params = params;
  }
}

}  // namespace

namespace {

struct StepOutcome {
  double loss = 0.0;
  BackboneGrads grads;
};

// Mutates running BN statistics (training forwards) but not the weights.
StepOutcome episodic_forward_backward(BackboneParams& params, const Episode& episode,
                                      const LearnerSpec& learner, BnMode bn) {
  const auto n_s = episode.support_features.rows();
  const auto n_q = episode.query_features.rows();
  const int n_classes = static_cast<int>(episode.class_ids.size());

  StepOutcome out;
  HeadGradients head;
  auto check_embeddings = [](const Matrix& z) {
    if (!z.allFinite()) throw NumericsError("episodic step: non-finite embeddings");
  };
  if (bn == BnMode::Transductive) {
    Matrix joint(n_s + n_q, episode.support_features.cols());
    joint.topRows(n_s) = episode.support_features;
    joint.bottomRows(n_q) = episode.query_features;
    ForwardResult fr = forward(params, joint, bn, /*training=*/true);
    check_embeddings(fr.output);
    head = head_loss_grads(learner, fr.output.topRows(n_s), episode.support_labels, n_classes,
                           fr.output.bottomRows(n_q), episode.query_labels);
    Matrix grad_out(n_s + n_q, fr.output.cols());
    grad_out.topRows(n_s) = head.d_support;
    grad_out.bottomRows(n_q) = head.d_query;
    out.grads = backward(params, fr.cache, grad_out);
  } else {
    ForwardResult fr_s = forward(params, episode.support_features, bn, /*training=*/true);
    check_embeddings(fr_s.output);
    ForwardResult fr_q = forward(params, episode.query_features, bn, /*training=*/true);
    check_embeddings(fr_q.output);
    head = head_loss_grads(learner, fr_s.output, episode.support_labels, n_classes, fr_q.output,
                           episode.query_labels);
    out.grads = backward(params, fr_s.cache, head.d_support);
    out.grads += backward(params, fr_q.cache, head.d_query);
  }
  out.loss = head.loss;
  if (!std::isfinite(out.loss)) {
    throw NumericsError("episodic step: non-finite loss");
  }
  return out;
}

}  // namespace

double episodic_train_step(BackboneParams& params, const Episode& episode,
                           const LearnerSpec& learner, BnMode bn, double lr) {
  StepOutcome out = episodic_forward_backward(params, episode, learner, bn);
  sgd_step(params, out.grads, lr);
  return out.loss;
}

TrainResult train_episodic(const GridDataset& ds, const SplitSpec& split,
                           BackboneParams initial, const TrainConfig& config) {
  if (config.steps < 1) throw InputError("train: steps must be >= 1");
  if (!(config.lr >= 0.0)) throw InputError("train: learning rate must be nonnegative");

  TrainResult result;
  result.params = initial;  // fallback when no validation ever runs
  BackboneParams params = std::move(initial);

  for (int step = 1; step <= config.steps; ++step) {
    const Episode episode =
        sample_episode(ds, split, SplitPart::Train, config.episode,
                       derive_seed(config.seed, kEpisodeStream + static_cast<std::uint64_t>(step)));
    double loss;
    try {
      if (config.lr == 0.0) {
        // Degenerate budget probe: evaluate the loss on a copy so params,
        // including running BN statistics, stay untouched.
        BackboneParams frozen = params;
        loss = episodic_forward_backward(frozen, episode, config.learner, config.bn).loss;
      } else {
        loss = episodic_train_step(params, episode, config.learner, config.bn, config.lr);
      }
    } catch (const NumericsError& e) {
      throw NumericsError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    result.log.entries.push_back({step, loss, false, 0.0});

    if (config.val_period > 0 && (step % config.val_period == 0 || step == config.steps)) {
      record_validation(result, params, validation_accuracy(params, ds, split, config, step),
                        step);
    }
  }
  if (result.log.best_step == 0) result.params = std::move(params);
  return result;
}

TrainResult train_erm(const GridDataset& ds, const SplitSpec& split, BackboneParams initial,
                      const TrainConfig& config) {
  if (config.steps < 1) throw InputError("train: steps must be >= 1");
  if (config.erm_batch_size < 2) throw InputError("train_erm: batch size must be >= 2");
  if (split.train_classes.empty() || split.train_domains.empty()) {
    throw InputError("train_erm: empty train part");
  }

  // All items of the train grid; labels index into the train-class list.
  const int n_classes = static_cast<int>(split.train_classes.size());
  std::vector<std::pair<int, int>> item_cells;  // (cell matrix index, row)
  std::vector<Matrix> cell_mats;
  std::vector<int> item_labels;
  for (int label = 0; label < n_classes; ++label) {
    const int class_id = split.train_classes[static_cast<std::size_t>(label)];
    for (int domain : split.train_domains) {
      cell_mats.push_back(ds.cell_features(domain, class_id));
      const int mat_idx = static_cast<int>(cell_mats.size()) - 1;
      for (int r = 0; r < cell_mats.back().rows(); ++r) {
        item_cells.emplace_back(mat_idx, r);
        item_labels.push_back(label);
      }
    }
  }
  const int n_items = static_cast<int>(item_cells.size());
  if (n_items < config.erm_batch_size) {
    throw InputError("train_erm: train part smaller than one batch");
  }

  TrainResult result;
  result.params = initial;
  BackboneParams params = std::move(initial);

  // Linear head over train classes, discarded at the end.
  const int d = params.feature_dim();
  Matrix head_w(d, n_classes);
  Vector head_b = Vector::Zero(n_classes);
  {
    Rng rng(derive_seed(config.seed, kHeadInitStream));
    const double limit = std::sqrt(6.0 / static_cast<double>(d));
    for (Eigen::Index r = 0; r < head_w.rows(); ++r) {
      for (Eigen::Index c = 0; c < head_w.cols(); ++c) head_w(r, c) = rng.uniform(-limit, limit);
    }
  }

  std::vector<int> order(static_cast<std::size_t>(n_items));
  for (int i = 0; i < n_items; ++i) order[static_cast<std::size_t>(i)] = i;
  std::size_t cursor = order.size();  // force an initial shuffle
  int epoch = 0;

  for (int step = 1; step <= config.steps; ++step) {
    if (cursor + static_cast<std::size_t>(config.erm_batch_size) > order.size()) {
      Rng rng(derive_seed(config.seed, kErmEpochStream + static_cast<std::uint64_t>(epoch++)));
      rng.shuffle(order);
      cursor = 0;
    }
    const int batch_size = config.erm_batch_size;
    Matrix batch(batch_size, ds.d_in());
    std::vector<int> labels(static_cast<std::size_t>(batch_size));
    for (int b = 0; b < batch_size; ++b) {
      const int item = order[cursor++];
      const auto& [mat_idx, row] = item_cells[static_cast<std::size_t>(item)];
      batch.row(b) = cell_mats[static_cast<std::size_t>(mat_idx)].row(row);
      labels[static_cast<std::size_t>(b)] = item_labels[static_cast<std::size_t>(item)];
    }

    // lr == 0 is a loss probe; keep params (and running stats) untouched.
    BackboneParams frozen;
    BackboneParams* net = &params;
    if (config.lr == 0.0) {
      frozen = params;
      net = &frozen;
    }
    ForwardResult fr = forward(*net, batch, config.bn, /*training=*/true);
    if (!fr.output.allFinite()) {
      throw NumericsError("train_erm: non-finite embeddings at step " + std::to_string(step));
    }
    Matrix logits = fr.output * head_w;
    logits.rowwise() += head_b.transpose();

    // Cross-entropy in logit space.
    double loss = 0.0;
    Matrix d_logits(batch_size, n_classes);
    for (int r = 0; r < batch_size; ++r) {
      const double m = logits.row(r).maxCoeff();
      const Eigen::ArrayXd e = (logits.row(r).array() - m).exp();
      const double z = e.sum();
      loss += m + std::log(z) - logits(r, labels[static_cast<std::size_t>(r)]);
      d_logits.row(r) = (e / z).matrix();
      d_logits(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
    }
    loss /= static_cast<double>(batch_size);
    d_logits /= static_cast<double>(batch_size);
    if (!std::isfinite(loss)) {
      throw NumericsError("train_erm: non-finite loss at step " + std::to_string(step));
    }

    if (config.lr > 0.0) {
      const Matrix d_head_w = fr.output.transpose() * d_logits;
      const Vector d_head_b = d_logits.colwise().sum();
      const Matrix d_features = d_logits * head_w.transpose();
      const BackboneGrads grads = backward(params, fr.cache, d_features);
      sgd_step(params, grads, config.lr);
      head_w -= config.lr * d_head_w;
      head_b -= config.lr * d_head_b;
    }
    result.log.entries.push_back({step, loss, false, 0.0});

    if (config.val_period > 0 && (step % config.val_period == 0 || step == config.steps)) {
      record_validation(result, params, validation_accuracy(params, ds, split, config, step),
                        step);
    }
  }
  if (result.log.best_step == 0) result.params = std::move(params);
  return result;
}

TrainResult train(const GridDataset& ds, const SplitSpec& split, BackboneParams initial,
                  const TrainConfig& config) {
  return config.regime == TrainRegime::Episodic ? train_episodic(ds, split, std::move(initial), config)
                                                : train_erm(ds, split, std::move(initial), config);
}

void save_train_log(const TrainLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& e : log.entries) {
    nlohmann::json j{{"step", e.step}, {"loss", e.loss}};
    if (e.has_val) j["val_accuracy"] = e.val_accuracy;
    out << j.dump() << "\n";
  }
  out << nlohmann::json{{"best_step", log.best_step},
                        {"best_val_accuracy", log.best_val_accuracy}}
             .dump()
      << "\n";
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace fsqs
