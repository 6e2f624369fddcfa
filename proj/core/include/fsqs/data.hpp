#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsqs/types.hpp"

namespace fsqs {

/// Parameters of the synthetic class-by-domain grid. Classes are Gaussian
/// clusters around well-separated centers; each domain applies a fixed
/// affine transform (rotation, per-coordinate scaling, translation) plus
/// optional additive noise, all deterministic in (seed, domain id).
struct GeneratorParams {
  int d_in = 8;
  int class_count = 20;
  int domain_count = 8;
  int items_per_cell = 64;
  double class_spread = 0.5;       // sigma of within-class noise
  double min_margin = 2.5;         // minimum pairwise center distance
  double center_box = 2.5;         // centers uniform in [-box, box]^d
  double translation_scale = 5.0;  // |t_m|, direction uniform on the sphere
  double scaling_jitter = 0.0;     // per-coordinate scale in [1-j, 1+j]
  int rotation_planes = 0;         // number of random Givens rotations
  double rotation_angle = 0.0;     // max |angle| per rotation plane
  double domain_noise = 0.0;       // sigma of extra per-item noise
};

struct DatasetManifest {
  int format_version = 1;
  std::string name = "synthetic";
  std::uint64_t seed = 0;
  GeneratorParams params;
};

struct CellIndex {
  int domain = 0;
  int class_id = 0;
  std::int64_t offset = 0;  // in items, into the feature file
  int count = 0;
};

/// Immutable after generation/loading. Features are stored as float32 in
/// (domain, class, item) order, exactly the on-disk layout, and widened to
/// double on access.
struct GridDataset {
  DatasetManifest manifest;
  std::vector<CellIndex> cells;
  std::vector<float> features;

  int d_in() const { return manifest.params.d_in; }
  int class_count() const { return manifest.params.class_count; }
  int domain_count() const { return manifest.params.domain_count; }

  const CellIndex& cell(int domain, int class_id) const;
  /// count x d_in matrix of one cell's items.
  Matrix cell_features(int domain, int class_id) const;
};

GridDataset generate_synthetic(const GeneratorParams& params, std::uint64_t seed,
                               const std::string& name = "synthetic");

/// Writes manifest.json plus features.f32 (little-endian float32) into dir.
void save_dataset(const GridDataset& ds, const std::string& dir);
GridDataset load_dataset(const std::string& dir);

enum class SplitPart { Train, Val, Test };

/// Disjoint exhaustive partition of both the class axis and the domain axis.
struct SplitSpec {
  std::vector<int> train_classes, val_classes, test_classes;
  std::vector<int> train_domains, val_domains, test_domains;

  const std::vector<int>& classes(SplitPart p) const;
  const std::vector<int>& domains(SplitPart p) const;
  void validate(int class_count, int domain_count) const;
};

struct SplitFractions {
  double train = 0.6;
  double val = 0.1;
  double test = 0.3;
};

SplitSpec make_split(int class_count, int domain_count, const SplitFractions& class_fractions,
                     const SplitFractions& domain_fractions, std::uint64_t seed);

void save_split(const SplitSpec& split, const std::string& path);
SplitSpec load_split(const std::string& path);

struct EpisodeConfig {
  int n_way = 5;
  int k_shot = 1;
  int q_per_class = 8;
  bool shifted = true;  // source domain != target domain
};

/// One n-way k-shot task: labelled support from the source domain, queries
/// from the target domain, both restricted to the sampled class subset.
/// Labels are positions into class_ids.
struct Episode {
  Matrix support_features;
  std::vector<int> support_labels;
  Matrix query_features;
  std::vector<int> query_labels;  // held for scoring only
  std::vector<int> class_ids;    // dataset class ids, length n_way
  int source_domain = 0;
  int target_domain = 0;
};

/// Deterministic in (dataset, split, part, config, seed). Classes are drawn
/// without replacement from the part's classes, the domain pair from the
/// part's domains (distinct iff shifted), and instances without replacement
/// within the episode (support and query never share an item when the
/// domains coincide).
Episode sample_episode(const GridDataset& ds, const SplitSpec& split, SplitPart part,
                       const EpisodeConfig& config, std::uint64_t seed);

}  // namespace fsqs
