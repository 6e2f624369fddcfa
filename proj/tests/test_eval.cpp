#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fsqs/ablation.hpp"
#include "fsqs/eval.hpp"
#include "fsqs/rng.hpp"

using namespace fsqs;

namespace {

struct Fixture {
  GridDataset ds;
  SplitSpec split;

  Fixture() {
    GeneratorParams p;
    p.class_count = 12;
    p.domain_count = 8;
    p.items_per_cell = 16;
    p.d_in = 6;
    ds = generate_synthetic(p, 303);
    split = make_split(p.class_count, p.domain_count, {0.5, 0.25, 0.25}, {0.5, 0.25, 0.25}, 9);
  }
};

EvalConfig small_eval() {
  EvalConfig cfg;
  cfg.episode.n_way = 3;
  cfg.episode.k_shot = 1;
  cfg.episode.q_per_class = 4;
  cfg.n_episodes = 40;
  cfg.seeds = {1, 2};
  return cfg;
}

}  // namespace

TEST_CASE("episode_accuracy: argmax with lowest-index tie break") {
  Matrix p(3, 3);
  p << 0.5, 0.3, 0.2,   // argmax 0
       0.4, 0.4, 0.2,   // tie -> 0
       0.1, 0.2, 0.7;   // argmax 2
  CHECK(episode_accuracy(p, {0, 0, 2}) == doctest::Approx(1.0));
  CHECK(episode_accuracy(p, {0, 1, 2}) == doctest::Approx(2.0 / 3));
}

TEST_CASE("evaluate_with: injected oracle posterior scores 1.0 with zero CI") {
  Fixture f;
  const BackboneParams identity = identity_backbone(6, /*with_bn=*/false);
  const PosteriorFn oracle = [](const EmbeddedEpisode& ep) {
    Matrix p = Matrix::Zero(ep.query.rows(), ep.n_classes);
    for (Eigen::Index j = 0; j < ep.query.rows(); ++j) {
      p(j, ep.query_labels[static_cast<std::size_t>(j)]) = 1.0;
    }
    return p;
  };
  const EvalReport r = evaluate_with(oracle, "oracle", identity, BnMode::Conventional, f.ds,
                                     f.split, SplitPart::Test, small_eval());
  CHECK(r.mean_accuracy == doctest::Approx(1.0));
  CHECK(r.ci95_half_width == doctest::Approx(0.0));
  CHECK(r.per_seed_mean.size() == 2);
  CHECK(r.per_episode_accuracy.size() == 80);
}

TEST_CASE("evaluate_with: uniform-random posterior converges to chance level") {
  GeneratorParams p;
  p.class_count = 20;
  p.domain_count = 8;
  p.items_per_cell = 16;
  p.d_in = 6;
  Fixture f;
  f.ds = generate_synthetic(p, 505);
  f.split = make_split(p.class_count, p.domain_count, {0.5, 0.25, 0.25}, {0.5, 0.25, 0.25}, 9);
  const BackboneParams identity = identity_backbone(6, /*with_bn=*/false);
  EvalConfig cfg;
  cfg.episode.n_way = 5;
  cfg.episode.k_shot = 1;
  cfg.episode.q_per_class = 4;
  cfg.n_episodes = 1000;
  cfg.seeds = {1};

  // Deterministic pseudo-random posterior derived from the query content.
  const PosteriorFn random_posterior = [](const EmbeddedEpisode& ep) {
    Matrix p(ep.query.rows(), ep.n_classes);
    for (Eigen::Index j = 0; j < ep.query.rows(); ++j) {
      std::uint64_t h = 0x9e3779b97f4a7c15ULL;
      for (Eigen::Index c = 0; c < ep.query.cols(); ++c) {
        h ^= static_cast<std::uint64_t>(std::llround(ep.query(j, c) * 1e6)) + (h << 6);
      }
      Rng rng(h);
      double z = 0.0;
      for (int k = 0; k < ep.n_classes; ++k) {
        p(j, k) = rng.uniform(0.01, 1.0);
        z += p(j, k);
      }
      p.row(j) /= z;
    }
    return p;
  };
  const EvalReport r = evaluate_with(random_posterior, "random", identity, BnMode::Conventional,
                                     f.ds, f.split, SplitPart::Test, cfg);
  CHECK(std::abs(r.mean_accuracy - 0.2) < 3.0 * r.ci95_half_width);
}

TEST_CASE("evaluate: identical seeds give identical reports; jobs do not matter") {
  Fixture f;
  const BackboneParams net = init_backbone({{6, 8, 4}}, 5);
  LearnerSpec spec;  // vanilla protonet
  const EvalConfig cfg = small_eval();

  const EvalReport a = evaluate(net, spec, BnMode::Conventional, f.ds, f.split, SplitPart::Test, cfg);
  const EvalReport b = evaluate(net, spec, BnMode::Conventional, f.ds, f.split, SplitPart::Test, cfg);
  CHECK(a.mean_accuracy == b.mean_accuracy);
  CHECK(a.per_episode_accuracy == b.per_episode_accuracy);

  EvalConfig parallel = cfg;
  parallel.jobs = 3;
  const EvalReport c =
      evaluate(net, spec, BnMode::Conventional, f.ds, f.split, SplitPart::Test, parallel);
  CHECK(c.per_episode_accuracy == a.per_episode_accuracy);
  CHECK(c.mean_accuracy == a.mean_accuracy);

  // CI is recomputable from the stored per-episode accuracies.
  const auto n = static_cast<double>(a.per_episode_accuracy.size());
  double mean = 0.0;
  for (double x : a.per_episode_accuracy) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : a.per_episode_accuracy) ss += (x - mean) * (x - mean);
  const double ci = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  CHECK(std::abs(ci - a.ci95_half_width) < 1e-12);
  CHECK(std::abs(mean - a.mean_accuracy) < 1e-12);
}

TEST_CASE("evaluate: accuracies stay in [0,1] and shifted flag is honored") {
  Fixture f;
  const BackboneParams net = init_backbone({{6, 8, 4}}, 6);
  LearnerSpec spec;
  spec.ot = OtUsage::TestOnly;
  EvalConfig cfg = small_eval();
  cfg.episode.shifted = false;
  const EvalReport r =
      evaluate(net, spec, BnMode::Transductive, f.ds, f.split, SplitPart::Val, cfg);
  CHECK_FALSE(r.shifted);
  for (double x : r.per_episode_accuracy) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
  CHECK(r.mean_accuracy >= 0.0);
  CHECK(r.mean_accuracy <= 1.0);
}

TEST_CASE("monotone identification: the qualitative ablation ordering on translation shift") {
  // Identity backbone with one neutral BN stage; data-module defaults at a
  // reduced episode count (the acceptance suite runs the full protocol).
  const GeneratorParams p;  // defaults: 20x8x64, shift = 10x class spread
  const GridDataset ds = generate_synthetic(p, 404);
  const SplitSpec split =
      make_split(p.class_count, p.domain_count, {0.6, 0.1, 0.3}, {0.5, 0.25, 0.25}, 11);
  const BackboneParams identity = identity_backbone(p.d_in, /*with_bn=*/true);

  EvalConfig cfg;
  cfg.episode.n_way = 5;
  cfg.episode.k_shot = 1;
  cfg.episode.q_per_class = 8;
  cfg.n_episodes = 200;
  cfg.seeds = {1};

  LearnerSpec vanilla;
  LearnerSpec with_ot;
  with_ot.ot = OtUsage::TestOnly;

  auto acc = [&](const LearnerSpec& spec, BnMode bn, bool shifted) {
    EvalConfig c = cfg;
    c.episode.shifted = shifted;
    return evaluate(identity, spec, bn, ds, split, SplitPart::Test, c).mean_accuracy;
  };

  const double vanilla_shift = acc(vanilla, BnMode::Conventional, true);
  const double tbn_only = acc(vanilla, BnMode::Transductive, true);
  const double ot_only = acc(with_ot, BnMode::Conventional, true);
  const double tp = acc(with_ot, BnMode::Transductive, true);

  CHECK(tp - vanilla_shift >= 0.15);
  CHECK(tbn_only >= vanilla_shift - 0.02);
  CHECK(tbn_only <= tp + 0.02);
  CHECK(ot_only >= vanilla_shift - 0.02);

  const double vanilla_plain = acc(vanilla, BnMode::Conventional, false);
  const double tp_plain = acc(with_ot, BnMode::Transductive, false);
  CHECK(std::abs(tp_plain - vanilla_plain) <= 0.02);
}

TEST_CASE("run_ablation: grid shape, determinism, failure isolation, file outputs") {
  Fixture f;

  AblationSettings settings;
  settings.episode.n_way = 3;
  settings.episode.k_shot = 1;
  settings.episode.q_per_class = 3;
  settings.eval_episodes = 10;
  settings.seeds = {1};
  settings.train.steps = 8;
  settings.train.lr = 0.01;
  settings.train.episode = settings.episode;
  settings.train.val_period = 4;
  settings.train.val_episodes = 3;
  settings.backbone.layer_sizes = {6, 8, 4};

  const std::vector<AblationCell> grid = default_ablation_grid();
  CHECK(grid.size() == 20);  // (3 episodic + 2 erm) x 2 bn x 2 shift

  // Restricted two-cell grid: one valid cell plus one that must fail
  // (9-way episodes cannot be sampled from a 3-class test part).
  std::vector<AblationCell> two;
  two.push_back(AblationCell{LearnerKind::ProtoNet, OtUsage::Never, BnMode::Conventional,
                             TrainRegime::Episodic, true});
  two.push_back(two[0]);

  const auto outcomes = run_ablation(f.ds, f.split, settings, two);
  REQUIRE(outcomes.size() == 2);
  CHECK(outcomes[0].ok);
  CHECK(outcomes[1].ok);
  CHECK(outcomes[0].report.mean_accuracy == outcomes[1].report.mean_accuracy);

  // Failure isolation: an unsatisfiable episode config fails its cell only.
  AblationSettings starving = settings;
  starving.episode.n_way = 9;
  starving.train.episode.n_way = 3;  // keep training feasible
  std::vector<AblationCell> mixed = two;
  const auto mixed_outcomes = run_ablation(f.ds, f.split, starving, mixed);
  CHECK_FALSE(mixed_outcomes[0].ok);
  CHECK(!mixed_outcomes[0].error.empty());

  const auto dir = std::filesystem::temp_directory_path() / "fsqs_eval_test";
  std::filesystem::create_directories(dir);
  const std::string csv_path = (dir / "ablation.csv").string();
  write_ablation_csv(outcomes, csv_path);
  std::ifstream csv(csv_path);
  std::string header;
  std::getline(csv, header);
  CHECK(header.find("learner,ot,bn,regime,shifted") == 0);
  CHECK(header.find("mean_accuracy") != std::string::npos);
  int rows = 0;
  std::string line;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 2);

  write_ablation_json(outcomes, (dir / "ablation.json").string());
  std::ifstream js((dir / "ablation.json").string());
  CHECK(js.good());

  EvalReport named = outcomes[0].report;
  write_report_json(named, (dir / "report.json").string());
  std::ifstream rp((dir / "report.json").string());
  CHECK(rp.good());
}
