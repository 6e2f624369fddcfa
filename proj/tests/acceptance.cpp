// Acceptance suite: runs every top-level requirement at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exits nonzero if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fsqs/ablation.hpp"
#include "fsqs/data.hpp"
#include "fsqs/eval.hpp"
#include "fsqs/rng.hpp"
#include "fsqs/training.hpp"

#ifndef FSQS_CLI_PATH
#error "FSQS_CLI_PATH must be defined by the build"
#endif

using namespace fsqs;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::printf("[%s] %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

Matrix random_points(Rng& rng, int n, int d, double scale = 1.0) {
  Matrix m(n, d);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < d; ++c) m(r, c) = scale * rng.gaussian();
  }
  return m;
}

// --------------------------------------------------------------------------
// 1. Sinkhorn vs the exhaustive assignment oracle.
// --------------------------------------------------------------------------
void criterion_ot_correctness() {
  Rng rng(1001);
  const auto start = std::chrono::steady_clock::now();
  double worst_gap = 0.0, worst_feas = 0.0;
  bool ok = true;
  for (int rep = 0; rep < 100; ++rep) {
    const Matrix c = cost_matrix(random_points(rng, 5, 3), random_points(rng, 5, 3));
    const auto [oracle_plan, oracle_cost] = exact_ot_oracle(c);
    const TransportPlan plan = sinkhorn(c, uniform_marginals(5, 5), {1e-3, 500000, 1e-9});
    const double cost = (plan.values.array() * c.array()).sum();
    const double gap = (cost - oracle_cost) / oracle_cost;
    worst_gap = std::max(worst_gap, gap);
    worst_feas = std::max(worst_feas, plan.feasibility_error);
    ok = ok && plan.converged && gap <= 0.01 && plan.feasibility_error <= 1e-9;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ok = ok && secs < 5.0;
  std::ostringstream d;
  d << "100 random 5x5 costs at eps=1e-3: worst relative gap " << worst_gap
    << " (limit 0.01), worst feasibility " << worst_feas << " (limit 1e-9), total " << secs
    << "s (limit 5s)";
  report("ot-correctness", ok, d.str());
}

// --------------------------------------------------------------------------
// 2. Barycentric map: convex-hull containment and translation equivariance.
// --------------------------------------------------------------------------
void criterion_barycentric_properties() {
  const GeneratorParams params;  // defaults
  const GridDataset ds = generate_synthetic(params, 2002);
  const SplitSpec split =
      make_split(params.class_count, params.domain_count, {0.5, 0.25, 0.25}, {0.5, 0.25, 0.25}, 1);
  const EpisodeConfig episode{5, 1, 8, true};
  const SinkhornConfig sink{0.05, 100000, 1e-9};

  Rng rng(2003);
  double worst_equivariance = 0.0, worst_hull = 0.0;
  bool ok = true;
  for (int rep = 0; rep < 100; ++rep) {
    const Episode ep = sample_episode(ds, split, SplitPart::Train, episode,
                                      derive_seed(42, static_cast<std::uint64_t>(rep)));
    const Matrix& s = ep.support_features;
    const Matrix& q = ep.query_features;

    const TransportPlan plan = sinkhorn(cost_matrix(s, q),
                                        uniform_marginals(s.rows(), q.rows()), sink);
    const TransportPlan norm = row_normalize(plan);
    const Matrix mapped = barycentric_map(norm, q);

    for (Eigen::Index i = 0; i < norm.values.rows(); ++i) {
      worst_hull = std::max(worst_hull, std::abs(norm.values.row(i).sum() - 1.0));
      worst_hull = std::max(worst_hull, -norm.values.row(i).minCoeff());
      for (Eigen::Index f = 0; f < mapped.cols(); ++f) {
        worst_hull = std::max(worst_hull, q.col(f).minCoeff() - mapped(i, f));
        worst_hull = std::max(worst_hull, mapped(i, f) - q.col(f).maxCoeff());
      }
    }

    Matrix v(1, s.cols());
    for (Eigen::Index f = 0; f < s.cols(); ++f) v(0, f) = rng.uniform(-5.0, 5.0);
    const Matrix s2 = s.rowwise() + v.row(0);
    const Matrix q2 = q.rowwise() + v.row(0);
    const TransportPlan plan2 = sinkhorn(cost_matrix(s2, q2),
                                         uniform_marginals(s.rows(), q.rows()), sink);
    const Matrix mapped2 = barycentric_map(row_normalize(plan2), q2);
    worst_equivariance = std::max(
        worst_equivariance, (mapped2 - (mapped.rowwise() + v.row(0))).cwiseAbs().maxCoeff());
  }
  ok = worst_hull <= 1e-6 && worst_equivariance <= 1e-6;
  std::ostringstream d;
  d << "100 episodes: worst hull violation " << worst_hull << ", worst translation deviation "
    << worst_equivariance << " (limits 1e-6)";
  report("barycentric-properties", ok, d.str());
}

// --------------------------------------------------------------------------
// 3. Analytic gradients of episodic TP and ProtoNet losses vs central FD.
// --------------------------------------------------------------------------
void criterion_gradient_fidelity() {
  GeneratorParams params;
  params.class_count = 12;
  params.domain_count = 8;
  params.items_per_cell = 16;
  params.d_in = 6;
  const GridDataset ds = generate_synthetic(params, 3001);
  const SplitSpec split =
      make_split(params.class_count, params.domain_count, {0.5, 0.25, 0.25}, {0.5, 0.25, 0.25}, 2);
  const EpisodeConfig episode{3, 2, 3, true};
  const SinkhornConfig sink{0.05, 100000, 1e-12};
  const double h = 1e-4;

  BackboneConfig net;
  net.layer_sizes = {6, 8, 8, 5};

  double worst_rel = 0.0;
  bool ok = true;
  for (int rep = 0; rep < 10; ++rep) {
    const Episode ep = sample_episode(ds, split, SplitPart::Train, episode,
                                      derive_seed(7000, static_cast<std::uint64_t>(rep)));
    const BackboneParams base =
        init_backbone(net, derive_seed(8000, static_cast<std::uint64_t>(rep)));
    const int n_classes = static_cast<int>(ep.class_ids.size());
    const auto n_s = ep.support_features.rows();

    auto joint_of = [&]() {
      Matrix joint(n_s + ep.query_features.rows(), ep.support_features.cols());
      joint.topRows(n_s) = ep.support_features;
      joint.bottomRows(ep.query_features.rows()) = ep.query_features;
      return joint;
    };

    for (bool use_tp : {false, true}) {
      // Analytic pass (transductive forward over support union query).
      BackboneParams work = base;
      ForwardResult fr = forward(work, joint_of(), BnMode::Transductive, true);
      const Matrix s_emb = fr.output.topRows(n_s);
      const Matrix q_emb = fr.output.bottomRows(ep.query_features.rows());
      HeadGradients head;
      Matrix plan_hat;
      if (use_tp) {
        TpHeadGradients tp =
            tp_loss_grads(s_emb, ep.support_labels, n_classes, q_emb, ep.query_labels, sink);
        plan_hat = row_normalize(tp.plan).values;
        head = tp;
      } else {
        head = protonet_loss_grads(s_emb, ep.support_labels, n_classes, q_emb, ep.query_labels);
      }
      Matrix grad_out(fr.output.rows(), fr.output.cols());
      grad_out.topRows(n_s) = head.d_support;
      grad_out.bottomRows(ep.query_features.rows()) = head.d_query;
      const BackboneGrads analytic = backward(work, fr.cache, grad_out);

      // FD oracle with the transport plan frozen at the base parameters.
      auto loss_at = [&](const BackboneParams& theta) {
        BackboneParams scratch = theta;
        ForwardResult f2 = forward(scratch, joint_of(), BnMode::Transductive, true);
        const Matrix s2 = f2.output.topRows(n_s);
        const Matrix q2 = f2.output.bottomRows(ep.query_features.rows());
        const Matrix base_emb = use_tp ? Matrix(plan_hat * q2) : s2;
        const Matrix protos = compute_prototypes(base_emb, ep.support_labels, n_classes);
        return episode_loss(protonet_posterior(protos, q2), ep.query_labels).value;
      };

      for (std::size_t layer = 0; layer < base.layers.size(); ++layer) {
        auto fd_vs = [&](const Matrix& analytic_t, auto accessor, Eigen::Index rows,
                         Eigen::Index cols) {
          Matrix fd(rows, cols);
          for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
              BackboneParams plus = base;
              accessor(plus.layers[layer])(r, c) += h;
              BackboneParams minus = base;
              accessor(minus.layers[layer])(r, c) -= h;
              fd(r, c) = (loss_at(plus) - loss_at(minus)) / (2 * h);
            }
          }
          const double rel =
              (analytic_t - fd).norm() / std::max({analytic_t.norm(), fd.norm(), 1e-6});
          worst_rel = std::max(worst_rel, rel);
        };
        const LayerParams& l = base.layers[layer];
        fd_vs(analytic.layers[layer].d_weight,
              [](LayerParams& p) -> Matrix& { return p.weight; }, l.weight.rows(),
              l.weight.cols());
        if (l.has_bn) {
          Matrix dg = analytic.layers[layer].d_gamma;
          Matrix fdg(l.gamma.size(), 1);
          for (Eigen::Index r = 0; r < l.gamma.size(); ++r) {
            BackboneParams plus = base;
            plus.layers[layer].gamma(r) += h;
            BackboneParams minus = base;
            minus.layers[layer].gamma(r) -= h;
            fdg(r, 0) = (loss_at(plus) - loss_at(minus)) / (2 * h);
          }
          const double rel = (dg - fdg).norm() / std::max({dg.norm(), fdg.norm(), 1e-6});
          worst_rel = std::max(worst_rel, rel);
          Matrix db = analytic.layers[layer].d_beta;
          Matrix fdb(l.beta.size(), 1);
          for (Eigen::Index r = 0; r < l.beta.size(); ++r) {
            BackboneParams plus = base;
            plus.layers[layer].beta(r) += h;
            BackboneParams minus = base;
            minus.layers[layer].beta(r) -= h;
            fdb(r, 0) = (loss_at(plus) - loss_at(minus)) / (2 * h);
          }
          const double relb = (db - fdb).norm() / std::max({db.norm(), fdb.norm(), 1e-6});
          worst_rel = std::max(worst_rel, relb);
        }
      }
    }
  }
  ok = worst_rel < 1e-4;
  std::ostringstream d;
  d << "10 random 3-way 2-shot episodes, TP (frozen plan) and ProtoNet losses: worst relative "
       "error "
    << worst_rel << " (limit 1e-4)";
  report("gradient-fidelity", ok, d.str());
}

// --------------------------------------------------------------------------
// 4. Self-coupling limit: query = support, eps = 1e-3.
// --------------------------------------------------------------------------
void criterion_self_coupling() {
  Rng rng(4001);
  const SinkhornConfig sink{1e-3, 500000, 1e-9};
  double worst = 0.0;
  bool ok = true;
  for (int rep = 0; rep < 20; ++rep) {
    const int n_way = 3 + static_cast<int>(rng.uniform_int(3));
    const int k = 1 + static_cast<int>(rng.uniform_int(2));
    const int d = 4 + static_cast<int>(rng.uniform_int(4));
    const Matrix s = random_points(rng, n_way * k, d, 2.0);
    std::vector<int> labels;
    for (int c = 0; c < n_way; ++c) {
      for (int i = 0; i < k; ++i) labels.push_back(c);
    }
    const auto [tp, plan] = transported_prototypes_posterior(s, labels, n_way, s, sink);
    const Matrix pn = protonet_posterior(compute_prototypes(s, labels, n_way), s);
    worst = std::max(worst, (tp - pn).cwiseAbs().maxCoeff());
  }
  ok = worst < 1e-3;
  std::ostringstream d;
  d << "20 trials with query = support: worst posterior inf-norm difference " << worst
    << " (limit 1e-3)";
  report("self-coupling-limit", ok, d.str());
}

// --------------------------------------------------------------------------
// 5 + 6. Qualitative ablation pattern, full grid runtime, protocol CSV.
// --------------------------------------------------------------------------
void criterion_pattern_and_protocol(const std::string& work_dir, int jobs) {
  const GeneratorParams params;  // defaults: translation shift = 10x class spread
  const GridDataset ds = generate_synthetic(params, 5001);
  const SplitSpec split =
      make_split(params.class_count, params.domain_count, {0.5, 0.25, 0.25}, {0.5, 0.25, 0.25}, 3);

  // Pattern cells on the pass-through backbone: the four transduction/OT
  // combinations evaluated on the same episode streams.
  const BackboneParams identity = identity_backbone(params.d_in, /*with_bn=*/true);
  EvalConfig cfg;
  cfg.episode = {5, 1, 8, true};
  cfg.n_episodes = 1000;
  cfg.seeds = {1, 2, 3};
  cfg.jobs = jobs;

  LearnerSpec vanilla;
  LearnerSpec with_ot;
  with_ot.ot = OtUsage::TestOnly;
  auto acc = [&](const LearnerSpec& spec, BnMode bn, bool shifted) {
    EvalConfig c = cfg;
    c.episode.shifted = shifted;
    return evaluate(identity, spec, bn, ds, split, SplitPart::Test, c).mean_accuracy;
  };

  const double vanilla_s = acc(vanilla, BnMode::Conventional, true);
  const double tbn_only = acc(vanilla, BnMode::Transductive, true);
  const double ot_only = acc(with_ot, BnMode::Conventional, true);
  const double tp = acc(with_ot, BnMode::Transductive, true);
  const double vanilla_u = acc(vanilla, BnMode::Conventional, false);
  const double tp_u = acc(with_ot, BnMode::Transductive, false);

  const double lo = std::min(vanilla_s, tp) - 1e-9;
  const double hi = std::max(vanilla_s, tp) + 1e-9;
  const bool pattern_ok = (tp - vanilla_s >= 0.15) && (std::abs(tp_u - vanilla_u) <= 0.02) &&
                          (tbn_only >= lo && tbn_only <= hi) &&
                          (ot_only >= lo || ot_only >= vanilla_s);

  // Full trained grid at the default desk-scale budgets.
  AblationSettings settings;
  settings.episode = {5, 1, 8, true};
  settings.eval_episodes = 1000;
  settings.seeds = {1, 2, 3};
  settings.train.steps = 2000;
  settings.train.lr = 0.01;
  settings.train.episode = settings.episode;
  settings.train.val_period = 100;
  settings.train.val_episodes = 100;
  settings.backbone.layer_sizes = {params.d_in, 64, 64, 16};
  settings.jobs = jobs;

  const auto grid = default_ablation_grid();
  const auto start = std::chrono::steady_clock::now();
  const auto outcomes = run_ablation(ds, split, settings, grid);
  const double minutes =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;

  bool all_cells_ok = outcomes.size() == grid.size();
  for (const auto& o : outcomes) all_cells_ok = all_cells_ok && o.ok;

  auto cell_acc = [&](OtUsage ot, BnMode bn, TrainRegime regime, bool shifted) {
    for (const auto& o : outcomes) {
      if (o.cell.ot == ot && o.cell.bn == bn && o.cell.regime == regime &&
          o.cell.shifted == shifted) {
        return o.report.mean_accuracy;
      }
    }
    return -1.0;
  };
  const double trained_vanilla = cell_acc(OtUsage::Never, BnMode::Conventional,
                                          TrainRegime::Episodic, true);
  const double trained_tp = cell_acc(OtUsage::TrainAndTest, BnMode::Transductive,
                                     TrainRegime::Episodic, true);
  const bool trained_gap_ok = trained_tp - trained_vanilla >= 0.15;

  std::ostringstream d;
  d << "identity-backbone cells (1000 episodes x 3 seeds): vanilla " << vanilla_s << ", tbn-only "
    << tbn_only << ", ot-only " << ot_only << ", tp " << tp << " (shifted); vanilla " << vanilla_u
    << " vs tp " << tp_u << " (unshifted); trained grid: vanilla " << trained_vanilla << " vs tp "
    << trained_tp << " shifted, " << outcomes.size() << " cells in " << minutes
    << " min (limit 15)";
  report("table2-pattern", pattern_ok && trained_gap_ok && all_cells_ok && minutes < 15.0,
         d.str());

  // Protocol conformance: the one CSV carries all three recommended
  // comparisons. Schema-checked by re-parsing the file.
  const std::string csv_path = (fs::path(work_dir) / "ablation.csv").string();
  write_ablation_csv(outcomes, csv_path);
  std::ifstream csv(csv_path);
  std::string header;
  std::getline(csv, header);
  bool has_episodic = false, has_erm = false, has_shifted = false, has_unshifted = false,
       has_cbn = false, has_tbn = false;
  std::string line;
  int rows = 0;
  bool all_rows_ok = true;
  while (std::getline(csv, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string learner, ot, bn, regime, shifted;
    std::getline(ss, learner, ',');
    std::getline(ss, ot, ',');
    std::getline(ss, bn, ',');
    std::getline(ss, regime, ',');
    std::getline(ss, shifted, ',');
    has_episodic |= regime == "episodic";
    has_erm |= regime == "erm";
    has_shifted |= shifted == "shifted";
    has_unshifted |= shifted == "unshifted";
    has_cbn |= bn == "cbn";
    has_tbn |= bn == "tbn";
    all_rows_ok = all_rows_ok && line.find(",ok,") != std::string::npos;
  }
  const bool schema_ok = header.rfind("learner,ot,bn,regime,shifted", 0) == 0 &&
                         rows == static_cast<int>(grid.size()) && all_rows_ok && has_episodic &&
                         has_erm && has_shifted && has_unshifted && has_cbn && has_tbn;
  std::ostringstream d6;
  d6 << "ablation CSV carries episodic vs erm, shifted vs unshifted, cbn vs tbn across " << rows
     << " rows";
  report("protocol-conformance", schema_ok, d6.str());
}

// --------------------------------------------------------------------------
// 7. Command-level determinism through run manifests.
// --------------------------------------------------------------------------
void criterion_determinism(const std::string& work_dir) {
  const std::string cli = FSQS_CLI_PATH;
  auto run = [&](const std::string& args) {
    const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
  };
  auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  };
  const std::string d = work_dir;
  bool ok = true;

  ok = ok && run("gen-data --out " + d + "/data --classes 12 --domains 8 --items-per-cell 12 "
                 "--dim 5 --seed 4 --class-fractions 0.5,0.25,0.25 "
                 "--domain-fractions 0.5,0.25,0.25") == 0;
  ok = ok && run("rerun " + d + "/data/run_manifest.json --out " + d + "/data_r") == 0;
  ok = ok && slurp(d + "/data/features.f32") == slurp(d + "/data_r/features.f32");
  ok = ok && slurp(d + "/data/split.json") == slurp(d + "/data_r/split.json");

  ok = ok && run("train --data " + d + "/data --out " + d + "/tr --episodes 30 --val-period 10 "
                 "--val-episodes 5 --n-way 3 --q-per-class 3 --layers 12 --feature-dim 6 "
                 "--learner tp --bn tbn --seed 2") == 0;
  ok = ok && run("rerun " + d + "/tr/run_manifest.json --out " + d + "/tr_r") == 0;
  ok = ok && slurp(d + "/tr/checkpoint.json") == slurp(d + "/tr_r/checkpoint.json");
  ok = ok && slurp(d + "/tr/train_log.jsonl") == slurp(d + "/tr_r/train_log.jsonl");

  ok = ok && run("eval --data " + d + "/data --checkpoint " + d + "/tr/checkpoint.json --out " +
                 d + "/ev --episodes 20 --seeds 1,2 --n-way 3 --q-per-class 3 --learner tp "
                 "--bn tbn") == 0;
  ok = ok && run("rerun " + d + "/ev/run_manifest.json --out " + d + "/ev_r") == 0;
  ok = ok && slurp(d + "/ev/report.json") == slurp(d + "/ev_r/report.json");
  ok = ok && slurp(d + "/ev/report.csv") == slurp(d + "/ev_r/report.csv");

  ok = ok && run("ablate --data " + d + "/data --out " + d + "/ab --episodes 10 "
                 "--train-episodes 20 --val-period 10 --val-episodes 4 --n-way 3 "
                 "--q-per-class 3 --seeds 1 --layers 12 --feature-dim 6 --regime episodic") == 0;
  ok = ok && run("rerun " + d + "/ab/run_manifest.json --out " + d + "/ab_r") == 0;
  ok = ok && slurp(d + "/ab/ablation.csv") == slurp(d + "/ab_r/ablation.csv");
  ok = ok && slurp(d + "/ab/ablation.json") == slurp(d + "/ab_r/ablation.json");

  report("determinism", ok,
         "gen-data, train, eval, ablate rerun from their manifests with bit-identical outputs");
}

}  // namespace

int main(int argc, char** argv) {
  int jobs = 2;
  if (argc > 1) jobs = std::atoi(argv[1]);

  const fs::path work = fs::temp_directory_path() / "fsqs_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  criterion_ot_correctness();
  criterion_barycentric_properties();
  criterion_gradient_fidelity();
  criterion_self_coupling();
  criterion_pattern_and_protocol(work.string(), jobs);
  criterion_determinism(work.string());

  if (g_failures > 0) {
    std::printf("%d criterion(s) FAILED\n", g_failures);
    return 1;
  }
  std::printf("all acceptance criteria passed\n");
  return 0;
}
