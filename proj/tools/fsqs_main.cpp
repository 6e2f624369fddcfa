// fsqs: dataset generation, training, evaluation and ablation grids for
// few-shot classification under support-query shift.

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fsqs/ablation.hpp"
#include "fsqs/data.hpp"
#include "fsqs/error.hpp"
#include "fsqs/eval.hpp"
#include "fsqs/rng.hpp"
#include "fsqs/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::string iso_timestamp() {
  char buf[32];
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Output directory resolution: explicit flag, else $FSQS_OUT_ROOT/<command>.
std::string resolve_out_dir(const std::string& flag_value, const std::string& command) {
  if (!flag_value.empty()) return flag_value;
  const char* root = std::getenv("FSQS_OUT_ROOT");
  if (root && *root) return (fs::path(root) / command).string();
  throw fsqs::InputError("no --out given and FSQS_OUT_ROOT is not set");
}

void prepare_out_dir(const std::string& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) {
      throw fsqs::InputError("output directory '" + dir +
                             "' exists and is not empty (use --force to overwrite)");
    }
  }
  fs::create_directories(dir);
}

void write_run_manifest(const std::string& dir, const std::string& command, const json& config,
                        const std::vector<std::uint64_t>& seeds, const json& artifacts) {
  json m;
  m["tool"] = "fsqs";
  m["version"] = kToolVersion;
  m["command"] = command;
  m["timestamp"] = iso_timestamp();
  m["config"] = config;
  m["seeds"] = seeds;
  m["artifacts"] = artifacts;
  std::ofstream out(fs::path(dir) / "run_manifest.json");
  if (!out) throw fsqs::IoError("cannot write run manifest in " + dir);
  out << m.dump(2) << "\n";
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) seeds.push_back(std::stoull(tok));
  }
  if (seeds.empty()) throw fsqs::InputError("empty seed list");
  return seeds;
}

fsqs::SplitFractions parse_fractions(const std::string& csv, const char* what) {
  std::vector<double> v;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) v.push_back(std::stod(tok));
  if (v.size() != 3) {
    throw fsqs::InputError(std::string(what) + ": expected three comma-separated fractions");
  }
  return {v[0], v[1], v[2]};
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> v;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) v.push_back(std::stoi(tok));
  return v;
}

fsqs::BnMode parse_bn(const std::string& s) {
  if (s == "cbn") return fsqs::BnMode::Conventional;
  if (s == "tbn") return fsqs::BnMode::Transductive;
  throw fsqs::InputError("unknown --bn value '" + s + "' (expected cbn|tbn)");
}

fsqs::TrainRegime parse_regime(const std::string& s) {
  if (s == "episodic") return fsqs::TrainRegime::Episodic;
  if (s == "erm") return fsqs::TrainRegime::Erm;
  throw fsqs::InputError("unknown --regime value '" + s + "' (expected episodic|erm)");
}

fsqs::OtUsage parse_ot(const std::string& s) {
  if (s == "never") return fsqs::OtUsage::Never;
  if (s == "test") return fsqs::OtUsage::TestOnly;
  if (s == "train") return fsqs::OtUsage::TrainAndTest;
  throw fsqs::InputError("unknown --ot value '" + s + "' (expected never|test|train)");
}

// --learner tp is shorthand for protonet with OT in the training loss.
struct LearnerChoice {
  fsqs::LearnerKind base = fsqs::LearnerKind::ProtoNet;
  fsqs::OtUsage ot = fsqs::OtUsage::Never;
};

LearnerChoice resolve_learner(const std::string& learner, const std::string& ot_flag) {
  LearnerChoice c;
  if (learner == "protonet") {
    c.base = fsqs::LearnerKind::ProtoNet;
  } else if (learner == "matchingnet") {
    c.base = fsqs::LearnerKind::MatchingNet;
  } else if (learner == "tp") {
    c.base = fsqs::LearnerKind::ProtoNet;
    c.ot = fsqs::OtUsage::TrainAndTest;
  } else {
    throw fsqs::InputError("unknown --learner '" + learner +
                           "' (expected protonet|matchingnet|tp)");
  }
  if (!ot_flag.empty()) {
    const fsqs::OtUsage requested = parse_ot(ot_flag);
    if (learner == "tp" && requested == fsqs::OtUsage::Never) {
      throw fsqs::InputError("--learner tp contradicts --ot never");
    }
    c.ot = requested;
  }
  return c;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataOptions {
  std::string out;
  std::string name = "synthetic";
  fsqs::GeneratorParams params;
  std::uint64_t seed = 1;
  std::uint64_t split_seed = 1;
  std::string class_fractions = "0.5,0.25,0.25";
  std::string domain_fractions = "0.5,0.25,0.25";
  bool force = false;
};

json gen_data_config(const GenDataOptions& o) {
  return json{{"name", o.name},
              {"classes", o.params.class_count},
              {"domains", o.params.domain_count},
              {"items_per_cell", o.params.items_per_cell},
              {"dim", o.params.d_in},
              {"class_spread", o.params.class_spread},
              {"min_margin", o.params.min_margin},
              {"center_box", o.params.center_box},
              {"translation_scale", o.params.translation_scale},
              {"scaling_jitter", o.params.scaling_jitter},
              {"rotation_planes", o.params.rotation_planes},
              {"rotation_angle", o.params.rotation_angle},
              {"domain_noise", o.params.domain_noise},
              {"seed", o.seed},
              {"split_seed", o.split_seed},
              {"class_fractions", o.class_fractions},
              {"domain_fractions", o.domain_fractions}};
}

void run_gen_data(const GenDataOptions& o) {
  prepare_out_dir(o.out, o.force);
  const fsqs::GridDataset ds = fsqs::generate_synthetic(o.params, o.seed, o.name);
  fsqs::save_dataset(ds, o.out);
  const fsqs::SplitSpec split =
      fsqs::make_split(o.params.class_count, o.params.domain_count,
                       parse_fractions(o.class_fractions, "--class-fractions"),
                       parse_fractions(o.domain_fractions, "--domain-fractions"), o.split_seed);
  fsqs::save_split(split, (fs::path(o.out) / "split.json").string());
  write_run_manifest(o.out, "gen-data", gen_data_config(o), {o.seed, o.split_seed},
                     json{{"dataset_manifest", "manifest.json"},
                          {"features", "features.f32"},
                          {"split", "split.json"}});
  std::cout << "dataset written to " << o.out << "\n";
}

GenDataOptions gen_data_from_config(const json& c, const std::string& out) {
  GenDataOptions o;
  o.out = out;
  o.force = true;
  o.name = c.at("name").get<std::string>();
  o.params.class_count = c.at("classes").get<int>();
  o.params.domain_count = c.at("domains").get<int>();
  o.params.items_per_cell = c.at("items_per_cell").get<int>();
  o.params.d_in = c.at("dim").get<int>();
  o.params.class_spread = c.at("class_spread").get<double>();
  o.params.min_margin = c.at("min_margin").get<double>();
  o.params.center_box = c.at("center_box").get<double>();
  o.params.translation_scale = c.at("translation_scale").get<double>();
  o.params.scaling_jitter = c.at("scaling_jitter").get<double>();
  o.params.rotation_planes = c.at("rotation_planes").get<int>();
  o.params.rotation_angle = c.at("rotation_angle").get<double>();
  o.params.domain_noise = c.at("domain_noise").get<double>();
  o.seed = c.at("seed").get<std::uint64_t>();
  o.split_seed = c.at("split_seed").get<std::uint64_t>();
  o.class_fractions = c.at("class_fractions").get<std::string>();
  o.domain_fractions = c.at("domain_fractions").get<std::string>();
  return o;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string data;
  std::string out;
  std::string learner = "protonet";
  std::string ot;  // empty: derived from learner
  std::string bn = "cbn";
  std::string regime = "episodic";
  int episodes = 2000;
  double lr = 0.01;
  int n_way = 5, k_shot = 1, q_per_class = 8;
  int val_period = 100, val_episodes = 100;
  int erm_batch = 64;
  std::string layers = "64,64";
  int feature_dim = 16;
  double epsilon = 0.05;
  int sinkhorn_iters = 1000;
  double sinkhorn_tol = 1e-9;
  std::uint64_t seed = 1;
  bool force = false;
};

json train_config_json(const TrainOptions& o) {
  return json{{"data", o.data},          {"learner", o.learner},
              {"ot", o.ot},              {"bn", o.bn},
              {"regime", o.regime},      {"episodes", o.episodes},
              {"lr", o.lr},              {"n_way", o.n_way},
              {"k_shot", o.k_shot},      {"q_per_class", o.q_per_class},
              {"val_period", o.val_period}, {"val_episodes", o.val_episodes},
              {"erm_batch", o.erm_batch},   {"layers", o.layers},
              {"feature_dim", o.feature_dim}, {"epsilon", o.epsilon},
              {"sinkhorn_iters", o.sinkhorn_iters}, {"sinkhorn_tol", o.sinkhorn_tol},
              {"seed", o.seed}};
}

TrainOptions train_from_config(const json& c, const std::string& out) {
  TrainOptions o;
  o.out = out;
  o.force = true;
  o.data = c.at("data").get<std::string>();
  o.learner = c.at("learner").get<std::string>();
  o.ot = c.at("ot").get<std::string>();
  o.bn = c.at("bn").get<std::string>();
  o.regime = c.at("regime").get<std::string>();
  o.episodes = c.at("episodes").get<int>();
  o.lr = c.at("lr").get<double>();
  o.n_way = c.at("n_way").get<int>();
  o.k_shot = c.at("k_shot").get<int>();
  o.q_per_class = c.at("q_per_class").get<int>();
  o.val_period = c.at("val_period").get<int>();
  o.val_episodes = c.at("val_episodes").get<int>();
  o.erm_batch = c.at("erm_batch").get<int>();
  o.layers = c.at("layers").get<std::string>();
  o.feature_dim = c.at("feature_dim").get<int>();
  o.epsilon = c.at("epsilon").get<double>();
  o.sinkhorn_iters = c.at("sinkhorn_iters").get<int>();
  o.sinkhorn_tol = c.at("sinkhorn_tol").get<double>();
  o.seed = c.at("seed").get<std::uint64_t>();
  return o;
}

void run_train(const TrainOptions& o) {
  prepare_out_dir(o.out, o.force);
  const fsqs::GridDataset ds = fsqs::load_dataset(o.data);
  const fsqs::SplitSpec split = fsqs::load_split((fs::path(o.data) / "split.json").string());

  const LearnerChoice learner = resolve_learner(o.learner, o.ot);

  fsqs::TrainConfig cfg;
  cfg.regime = parse_regime(o.regime);
  cfg.steps = o.episodes;
  cfg.lr = o.lr;
  cfg.episode = {o.n_way, o.k_shot, o.q_per_class, /*shifted=*/true};
  cfg.learner.base = learner.base;
  cfg.learner.ot = learner.ot;
  cfg.learner.sinkhorn = {o.epsilon, o.sinkhorn_iters, o.sinkhorn_tol};
  cfg.bn = parse_bn(o.bn);
  cfg.val_period = o.val_period;
  cfg.val_episodes = o.val_episodes;
  cfg.erm_batch_size = o.erm_batch;
  cfg.seed = o.seed;

  fsqs::BackboneConfig backbone;
  backbone.layer_sizes = parse_int_list(o.layers);
  backbone.layer_sizes.insert(backbone.layer_sizes.begin(), ds.d_in());
  backbone.layer_sizes.push_back(o.feature_dim);

  const fsqs::BackboneParams init =
      fsqs::init_backbone(backbone, fsqs::derive_seed(o.seed, 0xB0));
  const fsqs::TrainResult result = fsqs::train(ds, split, init, cfg);

  fsqs::save_checkpoint(result.params, (fs::path(o.out) / "checkpoint.json").string());
  fsqs::save_train_log(result.log, (fs::path(o.out) / "train_log.jsonl").string());
  write_run_manifest(o.out, "train", train_config_json(o), {o.seed},
                     json{{"checkpoint", "checkpoint.json"}, {"log", "train_log.jsonl"}});
  std::cout << "trained " << o.learner << " (" << o.regime << ", " << o.bn
            << "), best val accuracy " << result.log.best_val_accuracy << " at step "
            << result.log.best_step << "\n";
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string data;
  std::string checkpoint;
  std::string out;
  std::string learner = "protonet";
  std::string ot;
  std::string bn = "cbn";
  std::string part = "test";
  int episodes = 1000;
  std::string seeds = "1,2,3";
  int n_way = 5, k_shot = 1, q_per_class = 8;
  bool no_shift = false;
  double epsilon = 0.05;
  int sinkhorn_iters = 1000;
  double sinkhorn_tol = 1e-9;
  int jobs = 1;
  bool force = false;
};

json eval_config_json(const EvalOptions& o) {
  return json{{"data", o.data},       {"checkpoint", o.checkpoint},
              {"learner", o.learner}, {"ot", o.ot},
              {"bn", o.bn},           {"part", o.part},
              {"episodes", o.episodes}, {"seeds", o.seeds},
              {"n_way", o.n_way},     {"k_shot", o.k_shot},
              {"q_per_class", o.q_per_class}, {"no_shift", o.no_shift},
              {"epsilon", o.epsilon}, {"sinkhorn_iters", o.sinkhorn_iters},
              {"sinkhorn_tol", o.sinkhorn_tol}, {"jobs", o.jobs}};
}

EvalOptions eval_from_config(const json& c, const std::string& out) {
  EvalOptions o;
  o.out = out;
  o.force = true;
  o.data = c.at("data").get<std::string>();
  o.checkpoint = c.at("checkpoint").get<std::string>();
  o.learner = c.at("learner").get<std::string>();
  o.ot = c.at("ot").get<std::string>();
  o.bn = c.at("bn").get<std::string>();
  o.part = c.at("part").get<std::string>();
  o.episodes = c.at("episodes").get<int>();
  o.seeds = c.at("seeds").get<std::string>();
  o.n_way = c.at("n_way").get<int>();
  o.k_shot = c.at("k_shot").get<int>();
  o.q_per_class = c.at("q_per_class").get<int>();
  o.no_shift = c.at("no_shift").get<bool>();
  o.epsilon = c.at("epsilon").get<double>();
  o.sinkhorn_iters = c.at("sinkhorn_iters").get<int>();
  o.sinkhorn_tol = c.at("sinkhorn_tol").get<double>();
  o.jobs = c.at("jobs").get<int>();
  return o;
}

fsqs::SplitPart parse_part(const std::string& s) {
  if (s == "train") return fsqs::SplitPart::Train;
  if (s == "val") return fsqs::SplitPart::Val;
  if (s == "test") return fsqs::SplitPart::Test;
  throw fsqs::InputError("unknown --part '" + s + "' (expected train|val|test)");
}

void run_eval(const EvalOptions& o) {
  prepare_out_dir(o.out, o.force);
  const fsqs::GridDataset ds = fsqs::load_dataset(o.data);
  const fsqs::SplitSpec split = fsqs::load_split((fs::path(o.data) / "split.json").string());
  const fsqs::BackboneParams params = fsqs::load_checkpoint(o.checkpoint);

  const LearnerChoice learner = resolve_learner(o.learner, o.ot);
  fsqs::LearnerSpec spec;
  spec.base = learner.base;
  spec.ot = learner.ot;
  spec.sinkhorn = {o.epsilon, o.sinkhorn_iters, o.sinkhorn_tol};

  fsqs::EvalConfig cfg;
  cfg.episode = {o.n_way, o.k_shot, o.q_per_class, !o.no_shift};
  cfg.n_episodes = o.episodes;
  cfg.seeds = parse_seed_list(o.seeds);
  cfg.jobs = o.jobs;

  fsqs::EvalReport report =
      fsqs::evaluate(params, spec, parse_bn(o.bn), ds, split, parse_part(o.part), cfg);
  fsqs::write_report_json(report, (fs::path(o.out) / "report.json").string());

  // One-row CSV with the ablation schema, so rows concatenate across runs.
  fsqs::AblationOutcome row;
  row.cell = {learner.base, learner.ot, parse_bn(o.bn),
              fsqs::TrainRegime::Episodic, !o.no_shift};
  row.ok = true;
  row.report = report;
  fsqs::write_ablation_csv({row}, (fs::path(o.out) / "report.csv").string());

  write_run_manifest(o.out, "eval", eval_config_json(o), cfg.seeds,
                     json{{"report_json", "report.json"}, {"report_csv", "report.csv"}});
  std::cout << "accuracy " << report.mean_accuracy << " +/- " << report.ci95_half_width << " ("
            << report.per_episode_accuracy.size() << " episodes)\n";
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateOptions {
  std::string data;
  std::string out;
  std::string learners = "protonet";
  std::string ot;      // optional axis restriction
  std::string bn;      // optional axis restriction
  std::string regime;  // optional axis restriction
  std::string shift;   // optional axis restriction: shifted|unshifted
  int episodes = 1000;
  int train_episodes = 2000;
  double lr = 0.01;
  int n_way = 5, k_shot = 1, q_per_class = 8;
  int val_period = 100, val_episodes = 100;
  std::string seeds = "1,2,3";
  std::string layers = "64,64";
  int feature_dim = 16;
  double epsilon = 0.05;
  int sinkhorn_iters = 1000;
  double sinkhorn_tol = 1e-9;
  int jobs = 1;
  bool force = false;
};

json ablate_config_json(const AblateOptions& o) {
  return json{{"data", o.data},         {"learners", o.learners},
              {"ot", o.ot},             {"bn", o.bn},
              {"regime", o.regime},     {"shift", o.shift},
              {"episodes", o.episodes}, {"train_episodes", o.train_episodes},
              {"lr", o.lr},             {"n_way", o.n_way},
              {"k_shot", o.k_shot},     {"q_per_class", o.q_per_class},
              {"val_period", o.val_period}, {"val_episodes", o.val_episodes},
              {"seeds", o.seeds},       {"layers", o.layers},
              {"feature_dim", o.feature_dim}, {"epsilon", o.epsilon},
              {"sinkhorn_iters", o.sinkhorn_iters}, {"sinkhorn_tol", o.sinkhorn_tol},
              {"jobs", o.jobs}};
}

AblateOptions ablate_from_config(const json& c, const std::string& out) {
  AblateOptions o;
  o.out = out;
  o.force = true;
  o.data = c.at("data").get<std::string>();
  o.learners = c.at("learners").get<std::string>();
  o.ot = c.at("ot").get<std::string>();
  o.bn = c.at("bn").get<std::string>();
  o.regime = c.at("regime").get<std::string>();
  o.shift = c.at("shift").get<std::string>();
  o.episodes = c.at("episodes").get<int>();
  o.train_episodes = c.at("train_episodes").get<int>();
  o.lr = c.at("lr").get<double>();
  o.n_way = c.at("n_way").get<int>();
  o.k_shot = c.at("k_shot").get<int>();
  o.q_per_class = c.at("q_per_class").get<int>();
  o.val_period = c.at("val_period").get<int>();
  o.val_episodes = c.at("val_episodes").get<int>();
  o.seeds = c.at("seeds").get<std::string>();
  o.layers = c.at("layers").get<std::string>();
  o.feature_dim = c.at("feature_dim").get<int>();
  o.epsilon = c.at("epsilon").get<double>();
  o.sinkhorn_iters = c.at("sinkhorn_iters").get<int>();
  o.sinkhorn_tol = c.at("sinkhorn_tol").get<double>();
  o.jobs = c.at("jobs").get<int>();
  return o;
}

bool contains_token(const std::string& csv, const std::string& token) {
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == token) return true;
  }
  return false;
}

void run_ablate(const AblateOptions& o) {
  prepare_out_dir(o.out, o.force);
  const fsqs::GridDataset ds = fsqs::load_dataset(o.data);
  const fsqs::SplitSpec split = fsqs::load_split((fs::path(o.data) / "split.json").string());

  std::vector<fsqs::LearnerKind> bases;
  if (contains_token(o.learners, "protonet")) bases.push_back(fsqs::LearnerKind::ProtoNet);
  if (contains_token(o.learners, "matchingnet")) bases.push_back(fsqs::LearnerKind::MatchingNet);
  if (bases.empty()) throw fsqs::InputError("--learners selected no known learner");

  std::vector<fsqs::AblationCell> grid = fsqs::default_ablation_grid(bases);
  auto keep = [&](const fsqs::AblationCell& cell) {
    if (!o.ot.empty() && !contains_token(o.ot, fsqs::ot_name(cell.ot))) return false;
    if (!o.bn.empty() && !contains_token(o.bn, fsqs::bn_name(cell.bn))) return false;
    if (!o.regime.empty() && !contains_token(o.regime, fsqs::regime_name(cell.regime))) {
      return false;
    }
    if (!o.shift.empty() &&
        !contains_token(o.shift, cell.shifted ? "shifted" : "unshifted")) {
      return false;
    }
    return true;
  };
  std::erase_if(grid, [&](const fsqs::AblationCell& c) { return !keep(c); });
  if (grid.empty()) throw fsqs::InputError("axis restrictions selected an empty grid");

  fsqs::AblationSettings settings;
  settings.episode = {o.n_way, o.k_shot, o.q_per_class, /*shifted=*/true};
  settings.eval_episodes = o.episodes;
  settings.seeds = parse_seed_list(o.seeds);
  settings.train.steps = o.train_episodes;
  settings.train.lr = o.lr;
  settings.train.episode = settings.episode;
  settings.train.val_period = o.val_period;
  settings.train.val_episodes = o.val_episodes;
  settings.sinkhorn = {o.epsilon, o.sinkhorn_iters, o.sinkhorn_tol};
  settings.train.learner.sinkhorn = settings.sinkhorn;
  settings.backbone.layer_sizes = parse_int_list(o.layers);
  settings.backbone.layer_sizes.insert(settings.backbone.layer_sizes.begin(), ds.d_in());
  settings.backbone.layer_sizes.push_back(o.feature_dim);
  settings.jobs = o.jobs;

  const auto outcomes = fsqs::run_ablation(ds, split, settings, grid);
  fsqs::write_ablation_csv(outcomes, (fs::path(o.out) / "ablation.csv").string());
  fsqs::write_ablation_json(outcomes, (fs::path(o.out) / "ablation.json").string());
  write_run_manifest(o.out, "ablate", ablate_config_json(o), settings.seeds,
                     json{{"csv", "ablation.csv"}, {"json", "ablation.json"}});

  int failed = 0;
  for (const auto& oc : outcomes) {
    if (!oc.ok) {
      ++failed;
      std::cerr << "cell " << fsqs::learner_name(oc.cell.base) << "/" << fsqs::ot_name(oc.cell.ot)
                << "/" << fsqs::bn_name(oc.cell.bn) << "/" << fsqs::regime_name(oc.cell.regime)
                << (oc.cell.shifted ? "/shifted" : "/unshifted") << " failed: " << oc.error
                << "\n";
    }
  }
  std::cout << outcomes.size() - failed << "/" << outcomes.size() << " cells evaluated, results in "
            << o.out << "\n";
}

// ---------------------------------------------------------------------------
// rerun
// ---------------------------------------------------------------------------

void run_rerun(const std::string& manifest_path, const std::string& out) {
  std::ifstream in(manifest_path);
  if (!in) throw fsqs::IoError("cannot open manifest: " + manifest_path);
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw fsqs::IoError(std::string("malformed manifest: ") + e.what());
  }
  const std::string command = m.at("command").get<std::string>();
  const json& config = m.at("config");
  const std::string target = out.empty() ? fs::path(manifest_path).parent_path().string() : out;

  if (command == "gen-data") {
    run_gen_data(gen_data_from_config(config, target));
  } else if (command == "train") {
    run_train(train_from_config(config, target));
  } else if (command == "eval") {
    run_eval(eval_from_config(config, target));
  } else if (command == "ablate") {
    run_ablate(ablate_from_config(config, target));
  } else {
    throw fsqs::InputError("manifest has unknown command '" + command + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot learning under support-query shift: data, training, evaluation"};
  app.require_subcommand(1);

  GenDataOptions gen;
  CLI::App* cmd_gen = app.add_subcommand("gen-data", "Generate a synthetic class-by-domain dataset");
  cmd_gen->add_option("--out", gen.out, "Output directory (default: $FSQS_OUT_ROOT/gen-data)");
  cmd_gen->add_option("--name", gen.name, "Dataset name");
  cmd_gen->add_option("--classes", gen.params.class_count, "Number of classes");
  cmd_gen->add_option("--domains", gen.params.domain_count, "Number of domains");
  cmd_gen->add_option("--items-per-cell", gen.params.items_per_cell, "Items per (class, domain)");
  cmd_gen->add_option("--dim", gen.params.d_in, "Feature dimension");
  cmd_gen->add_option("--class-spread", gen.params.class_spread, "Within-class sigma");
  cmd_gen->add_option("--min-margin", gen.params.min_margin, "Minimum center separation");
  cmd_gen->add_option("--center-box", gen.params.center_box, "Center sampling box half-width");
  cmd_gen->add_option("--translation-scale", gen.params.translation_scale,
                      "Domain translation magnitude");
  cmd_gen->add_option("--scaling-jitter", gen.params.scaling_jitter, "Per-axis domain scaling");
  cmd_gen->add_option("--rotation-planes", gen.params.rotation_planes, "Domain rotation planes");
  cmd_gen->add_option("--rotation-angle", gen.params.rotation_angle, "Max rotation angle");
  cmd_gen->add_option("--domain-noise", gen.params.domain_noise, "Per-domain additive noise");
  cmd_gen->add_option("--seed", gen.seed, "Dataset seed");
  cmd_gen->add_option("--split-seed", gen.split_seed, "Split seed");
  cmd_gen->add_option("--class-fractions", gen.class_fractions, "train,val,test class fractions");
  cmd_gen->add_option("--domain-fractions", gen.domain_fractions, "train,val,test domain fractions");
  cmd_gen->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainOptions tr;
  CLI::App* cmd_train = app.add_subcommand("train", "Train a backbone");
  cmd_train->add_option("--data", tr.data, "Dataset directory")->required();
  cmd_train->add_option("--out", tr.out, "Output directory");
  cmd_train->add_option("--learner", tr.learner, "protonet|matchingnet|tp");
  cmd_train->add_option("--ot", tr.ot, "never|test|train");
  cmd_train->add_option("--bn", tr.bn, "cbn|tbn");
  cmd_train->add_option("--regime", tr.regime, "episodic|erm");
  cmd_train->add_option("--episodes", tr.episodes, "Training episodes / ERM steps");
  cmd_train->add_option("--lr", tr.lr, "Learning rate");
  cmd_train->add_option("--n-way", tr.n_way, "Classes per episode");
  cmd_train->add_option("--k-shot", tr.k_shot, "Support instances per class");
  cmd_train->add_option("--q-per-class", tr.q_per_class, "Query instances per class");
  cmd_train->add_option("--val-period", tr.val_period, "Validate every N steps");
  cmd_train->add_option("--val-episodes", tr.val_episodes, "Validation episode count");
  cmd_train->add_option("--erm-batch", tr.erm_batch, "ERM minibatch size");
  cmd_train->add_option("--layers", tr.layers, "Hidden layer sizes, comma separated");
  cmd_train->add_option("--feature-dim", tr.feature_dim, "Output feature dimension");
  cmd_train->add_option("--epsilon", tr.epsilon, "Sinkhorn entropic regularization");
  cmd_train->add_option("--sinkhorn-iters", tr.sinkhorn_iters, "Sinkhorn iteration cap");
  cmd_train->add_option("--sinkhorn-tol", tr.sinkhorn_tol, "Sinkhorn marginal tolerance");
  cmd_train->add_option("--seed", tr.seed, "Training seed");
  cmd_train->add_flag("--force", tr.force, "Overwrite a non-empty output directory");

  EvalOptions ev;
  CLI::App* cmd_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  cmd_eval->add_option("--data", ev.data, "Dataset directory")->required();
  cmd_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  cmd_eval->add_option("--out", ev.out, "Output directory");
  cmd_eval->add_option("--learner", ev.learner, "protonet|matchingnet|tp");
  cmd_eval->add_option("--ot", ev.ot, "never|test|train");
  cmd_eval->add_option("--bn", ev.bn, "cbn|tbn");
  cmd_eval->add_option("--part", ev.part, "train|val|test");
  cmd_eval->add_option("--episodes", ev.episodes, "Episodes per seed");
  cmd_eval->add_option("--seeds", ev.seeds, "Comma-separated seed list");
  cmd_eval->add_option("--n-way", ev.n_way, "Classes per episode");
  cmd_eval->add_option("--k-shot", ev.k_shot, "Support instances per class");
  cmd_eval->add_option("--q-per-class", ev.q_per_class, "Query instances per class");
  cmd_eval->add_flag("--no-shift", ev.no_shift, "Evaluate without support-query shift");
  cmd_eval->add_option("--epsilon", ev.epsilon, "Sinkhorn entropic regularization");
  cmd_eval->add_option("--sinkhorn-iters", ev.sinkhorn_iters, "Sinkhorn iteration cap");
  cmd_eval->add_option("--sinkhorn-tol", ev.sinkhorn_tol, "Sinkhorn marginal tolerance");
  cmd_eval->add_option("--jobs", ev.jobs, "Parallel evaluation workers");
  cmd_eval->add_flag("--force", ev.force, "Overwrite a non-empty output directory");

  AblateOptions ab;
  CLI::App* cmd_ablate = app.add_subcommand("ablate", "Run the ablation grid");
  cmd_ablate->add_option("--data", ab.data, "Dataset directory")->required();
  cmd_ablate->add_option("--out", ab.out, "Output directory");
  cmd_ablate->add_option("--learners", ab.learners, "Comma-separated base learners");
  cmd_ablate->add_option("--ot", ab.ot, "Restrict the OT axis (never,test,train)");
  cmd_ablate->add_option("--bn", ab.bn, "Restrict the BN axis (cbn,tbn)");
  cmd_ablate->add_option("--regime", ab.regime, "Restrict the regime axis (episodic,erm)");
  cmd_ablate->add_option("--shift", ab.shift, "Restrict the shift axis (shifted,unshifted)");
  cmd_ablate->add_option("--episodes", ab.episodes, "Evaluation episodes per seed");
  cmd_ablate->add_option("--train-episodes", ab.train_episodes, "Training budget per checkpoint");
  cmd_ablate->add_option("--lr", ab.lr, "Learning rate");
  cmd_ablate->add_option("--n-way", ab.n_way, "Classes per episode");
  cmd_ablate->add_option("--k-shot", ab.k_shot, "Support instances per class");
  cmd_ablate->add_option("--q-per-class", ab.q_per_class, "Query instances per class");
  cmd_ablate->add_option("--val-period", ab.val_period, "Validate every N steps");
  cmd_ablate->add_option("--val-episodes", ab.val_episodes, "Validation episode count");
  cmd_ablate->add_option("--seeds", ab.seeds, "Comma-separated seed list");
  cmd_ablate->add_option("--layers", ab.layers, "Hidden layer sizes, comma separated");
  cmd_ablate->add_option("--feature-dim", ab.feature_dim, "Output feature dimension");
  cmd_ablate->add_option("--epsilon", ab.epsilon, "Sinkhorn entropic regularization");
  cmd_ablate->add_option("--sinkhorn-iters", ab.sinkhorn_iters, "Sinkhorn iteration cap");
  cmd_ablate->add_option("--sinkhorn-tol", ab.sinkhorn_tol, "Sinkhorn marginal tolerance");
  cmd_ablate->add_option("--jobs", ab.jobs, "Parallel evaluation workers");
  cmd_ablate->add_flag("--force", ab.force, "Overwrite a non-empty output directory");

  std::string rerun_manifest;
  std::string rerun_out;
  CLI::App* cmd_rerun = app.add_subcommand("rerun", "Re-execute a command from its run manifest");
  cmd_rerun->add_option("manifest", rerun_manifest, "Path to run_manifest.json")->required();
  cmd_rerun->add_option("--out", rerun_out, "Output directory (default: the manifest's directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the message / help
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (cmd_gen->parsed()) {
      gen.out = resolve_out_dir(gen.out, "gen-data");
      run_gen_data(gen);
    } else if (cmd_train->parsed()) {
      tr.out = resolve_out_dir(tr.out, "train");
      run_train(tr);
    } else if (cmd_eval->parsed()) {
      ev.out = resolve_out_dir(ev.out, "eval");
      run_eval(ev);
    } else if (cmd_ablate->parsed()) {
      ab.out = resolve_out_dir(ab.out, "ablate");
      run_ablate(ab);
    } else if (cmd_rerun->parsed()) {
      run_rerun(rerun_manifest, rerun_out);
    }
  } catch (const fsqs::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
