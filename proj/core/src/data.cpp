#include "fsqs/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "fsqs/error.hpp"
#include "fsqs/rng.hpp"

namespace fsqs {

namespace {

using nlohmann::json;

// Seed streams; arbitrary distinct tags keep per-purpose generators independent.
constexpr std::uint64_t kCenterStream = 0x11;
constexpr std::uint64_t kDomainStream = 0x2000;
constexpr std::uint64_t kCellStream = 0x40000;

struct DomainTransform {
  Vector translation;
  Vector scaling;
  // Givens rotations applied in order: (axis_a, axis_b, angle).
  std::vector<std::tuple<int, int, double>> rotations;

  Vector apply(const Vector& x) const {
    Vector y = x.cwiseProduct(scaling);
    for (const auto& [a, b, angle] : rotations) {
      const double c = std::cos(angle), s = std::sin(angle);
      const double ya = y(a), yb = y(b);
      y(a) = c * ya - s * yb;
      y(b) = s * ya + c * yb;
    }
    return y + translation;
  }
};

DomainTransform domain_transform(const GeneratorParams& p, std::uint64_t seed, int domain) {
  Rng rng(derive_seed(seed, kDomainStream + static_cast<std::uint64_t>(domain)));
  DomainTransform t;
  t.translation = Vector::Zero(p.d_in);
  if (p.translation_scale > 0.0) {
    Vector dir(p.d_in);
    for (int i = 0; i < p.d_in; ++i) dir(i) = rng.gaussian();
    const double n = dir.norm();
    if (n > 0.0) t.translation = p.translation_scale * dir / n;
  }
  t.scaling = Vector::Ones(p.d_in);
  if (p.scaling_jitter > 0.0) {
    for (int i = 0; i < p.d_in; ++i) {
      t.scaling(i) = rng.uniform(1.0 - p.scaling_jitter, 1.0 + p.scaling_jitter);
    }
  }
  for (int r = 0; r < p.rotation_planes; ++r) {
    const int a = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p.d_in)));
    int b = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p.d_in - 1)));
    if (b >= a) ++b;
    t.rotations.emplace_back(a, b, rng.uniform(-p.rotation_angle, p.rotation_angle));
  }
  return t;
}

void validate_params(const GeneratorParams& p) {
  if (p.d_in < 1) throw InputError("generator: d_in must be >= 1");
  if (p.class_count < 2) throw InputError("generator: need at least 2 classes");
  if (p.domain_count < 1) throw InputError("generator: need at least 1 domain");
  if (p.items_per_cell < 1) throw InputError("generator: items_per_cell must be >= 1");
  if (!(p.min_margin > 0.0)) throw InputError("generator: degenerate zero margin");
  if (p.class_spread < 0.0 || p.domain_noise < 0.0) {
    throw InputError("generator: noise sigmas must be nonnegative");
  }
  if (p.center_box <= 0.0) throw InputError("generator: center_box must be > 0");
}

std::vector<Vector> sample_centers(const GeneratorParams& p, std::uint64_t seed) {
  Rng rng(derive_seed(seed, kCenterStream));
  std::vector<Vector> centers;
  centers.reserve(static_cast<std::size_t>(p.class_count));
  long attempts = 0;
  const long max_attempts = 200000L;
  while (static_cast<int>(centers.size()) < p.class_count) {
    if (++attempts > max_attempts) {
      throw InputError("generator: could not place class centers with margin " +
                       std::to_string(p.min_margin) + "; enlarge center_box or lower margin");
    }
    Vector c(p.d_in);
    for (int i = 0; i < p.d_in; ++i) c(i) = rng.uniform(-p.center_box, p.center_box);
    bool ok = true;
    for (const Vector& e : centers) {
      if ((c - e).norm() < p.min_margin) {
        ok = false;
        break;
      }
    }
    if (ok) centers.push_back(std::move(c));
  }
  return centers;
}

void write_f32_le(std::ofstream& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  const unsigned char bytes[4] = {
      static_cast<unsigned char>(bits & 0xff), static_cast<unsigned char>((bits >> 8) & 0xff),
      static_cast<unsigned char>((bits >> 16) & 0xff),
      static_cast<unsigned char>((bits >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

float read_f32_le(std::ifstream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) |
                             (static_cast<std::uint32_t>(bytes[1]) << 8) |
                             (static_cast<std::uint32_t>(bytes[2]) << 16) |
                             (static_cast<std::uint32_t>(bytes[3]) << 24);
  return std::bit_cast<float>(bits);
}

json params_to_json(const GeneratorParams& p) {
  return json{{"d_in", p.d_in},
              {"class_count", p.class_count},
              {"domain_count", p.domain_count},
              {"items_per_cell", p.items_per_cell},
              {"class_spread", p.class_spread},
              {"min_margin", p.min_margin},
              {"center_box", p.center_box},
              {"translation_scale", p.translation_scale},
              {"scaling_jitter", p.scaling_jitter},
              {"rotation_planes", p.rotation_planes},
              {"rotation_angle", p.rotation_angle},
              {"domain_noise", p.domain_noise}};
}

GeneratorParams params_from_json(const json& j) {
  GeneratorParams p;
  p.d_in = j.at("d_in").get<int>();
  p.class_count = j.at("class_count").get<int>();
  p.domain_count = j.at("domain_count").get<int>();
  p.items_per_cell = j.at("items_per_cell").get<int>();
  p.class_spread = j.at("class_spread").get<double>();
  p.min_margin = j.at("min_margin").get<double>();
  p.center_box = j.at("center_box").get<double>();
  p.translation_scale = j.at("translation_scale").get<double>();
  p.scaling_jitter = j.at("scaling_jitter").get<double>();
  p.rotation_planes = j.at("rotation_planes").get<int>();
  p.rotation_angle = j.at("rotation_angle").get<double>();
  p.domain_noise = j.at("domain_noise").get<double>();
  return p;
}

}  // namespace

const CellIndex& GridDataset::cell(int domain, int class_id) const {
  if (domain < 0 || domain >= domain_count() || class_id < 0 || class_id >= class_count()) {
    throw InputError("dataset: cell (domain=" + std::to_string(domain) +
                     ", class=" + std::to_string(class_id) + ") out of range");
  }
  return cells[static_cast<std::size_t>(domain) * static_cast<std::size_t>(class_count()) +
               static_cast<std::size_t>(class_id)];
}

Matrix GridDataset::cell_features(int domain, int class_id) const {
  const CellIndex& c = cell(domain, class_id);
  Matrix m(c.count, d_in());
  for (int i = 0; i < c.count; ++i) {
    const std::size_t base =
        (static_cast<std::size_t>(c.offset) + static_cast<std::size_t>(i)) *
        static_cast<std::size_t>(d_in());
    for (int f = 0; f < d_in(); ++f) {
      m(i, f) = static_cast<double>(features[base + static_cast<std::size_t>(f)]);
    }
  }
  return m;
}

GridDataset generate_synthetic(const GeneratorParams& params, std::uint64_t seed,
                               const std::string& name) {
  validate_params(params);
  GridDataset ds;
  ds.manifest.name = name;
  ds.manifest.seed = seed;
  ds.manifest.params = params;

  const std::vector<Vector> centers = sample_centers(params, seed);
  std::vector<DomainTransform> transforms;
  transforms.reserve(static_cast<std::size_t>(params.domain_count));
  for (int m = 0; m < params.domain_count; ++m) {
    transforms.push_back(domain_transform(params, seed, m));
  }

  const std::size_t total_items = static_cast<std::size_t>(params.domain_count) *
                                  static_cast<std::size_t>(params.class_count) *
                                  static_cast<std::size_t>(params.items_per_cell);
  ds.features.reserve(total_items * static_cast<std::size_t>(params.d_in));

  std::int64_t offset = 0;
  for (int m = 0; m < params.domain_count; ++m) {
    for (int c = 0; c < params.class_count; ++c) {
      Rng rng(derive_seed(seed, kCellStream +
                                    static_cast<std::uint64_t>(m) *
                                        static_cast<std::uint64_t>(params.class_count) +
                                    static_cast<std::uint64_t>(c)));
      for (int item = 0; item < params.items_per_cell; ++item) {
        Vector x = centers[static_cast<std::size_t>(c)];
        for (int f = 0; f < params.d_in; ++f) x(f) += params.class_spread * rng.gaussian();
        x = transforms[static_cast<std::size_t>(m)].apply(x);
        if (params.domain_noise > 0.0) {
          for (int f = 0; f < params.d_in; ++f) x(f) += params.domain_noise * rng.gaussian();
        }
        for (int f = 0; f < params.d_in; ++f) ds.features.push_back(static_cast<float>(x(f)));
      }
      ds.cells.push_back(CellIndex{m, c, offset, params.items_per_cell});
      offset += params.items_per_cell;
    }
  }
  return ds;
}

void save_dataset(const GridDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);

  json j;
  j["format_version"] = ds.manifest.format_version;
  j["name"] = ds.manifest.name;
  j["seed"] = ds.manifest.seed;
  j["params"] = params_to_json(ds.manifest.params);
  json cells = json::array();
  for (const auto& c : ds.cells) {
    cells.push_back(json{{"domain", c.domain},
                         {"class", c.class_id},
                         {"offset", c.offset},
                         {"count", c.count}});
  }
  j["cells"] = std::move(cells);

  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ofstream mf(manifest_path);
  if (!mf) throw IoError("cannot write " + manifest_path);
  mf << j.dump(2) << "\n";

  const std::string feat_path = (fs::path(dir) / "features.f32").string();
  std::ofstream ff(feat_path, std::ios::binary);
  if (!ff) throw IoError("cannot write " + feat_path);
  for (float v : ds.features) write_f32_le(ff, v);
  if (!ff) throw IoError("failed writing " + feat_path);
}

GridDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ifstream mf(manifest_path);
  if (!mf) throw IoError("cannot open " + manifest_path);
  json j;
  try {
    mf >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path + ": " + e.what());
  }
  GridDataset ds;
  ds.manifest.format_version = j.at("format_version").get<int>();
  if (ds.manifest.format_version != 1) {
    throw IoError("unsupported dataset format_version in " + manifest_path);
  }
  ds.manifest.name = j.at("name").get<std::string>();
  ds.manifest.seed = j.at("seed").get<std::uint64_t>();
  ds.manifest.params = params_from_json(j.at("params"));

  std::size_t total_items = 0;
  for (const auto& cj : j.at("cells")) {
    CellIndex c;
    c.domain = cj.at("domain").get<int>();
    c.class_id = cj.at("class").get<int>();
    c.offset = cj.at("offset").get<std::int64_t>();
    c.count = cj.at("count").get<int>();
    total_items += static_cast<std::size_t>(c.count);
    ds.cells.push_back(c);
  }
  const std::size_t expected =
      static_cast<std::size_t>(ds.manifest.params.domain_count) *
      static_cast<std::size_t>(ds.manifest.params.class_count);
  if (ds.cells.size() != expected) throw IoError("dataset: cell table size mismatch");

  const std::string feat_path = (fs::path(dir) / "features.f32").string();
  std::ifstream ff(feat_path, std::ios::binary);
  if (!ff) throw IoError("cannot open " + feat_path);
  const std::size_t n_floats = total_items * static_cast<std::size_t>(ds.manifest.params.d_in);
  ds.features.resize(n_floats);
  for (std::size_t i = 0; i < n_floats; ++i) {
    ds.features[i] = read_f32_le(ff);
    if (!ff) throw IoError("feature file truncated: " + feat_path);
  }
  return ds;
}

const std::vector<int>& SplitSpec::classes(SplitPart p) const {
  switch (p) {
    case SplitPart::Train: return train_classes;
    case SplitPart::Val: return val_classes;
    default: return test_classes;
  }
}

const std::vector<int>& SplitSpec::domains(SplitPart p) const {
  switch (p) {
    case SplitPart::Train: return train_domains;
    case SplitPart::Val: return val_domains;
    default: return test_domains;
  }
}

void SplitSpec::validate(int class_count, int domain_count) const {
  auto check_axis = [](const std::vector<int>& a, const std::vector<int>& b,
                       const std::vector<int>& c, int n, const char* axis) {
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    std::size_t total = 0;
    for (const auto* part : {&a, &b, &c}) {
      for (int v : *part) {
        if (v < 0 || v >= n) throw InputError(std::string("split: ") + axis + " index out of range");
        if (seen[static_cast<std::size_t>(v)]) {
          throw InputError(std::string("split: ") + axis + " parts are not disjoint");
        }
        seen[static_cast<std::size_t>(v)] = true;
        ++total;
      }
    }
    if (total != static_cast<std::size_t>(n)) {
      throw InputError(std::string("split: ") + axis + " parts do not cover all indices");
    }
  };
  check_axis(train_classes, val_classes, test_classes, class_count, "class");
  check_axis(train_domains, val_domains, test_domains, domain_count, "domain");
}

namespace {

// floor allocation plus largest-remainder distribution; every part >= 1.
std::vector<int> partition_counts(int n, const SplitFractions& f) {
  const double fr[3] = {f.train, f.val, f.test};
  double sum = 0.0;
  for (double x : fr) {
    if (!(x > 0.0)) throw InputError("split: fractions must be positive");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InputError("split: fractions must sum to 1");

  int counts[3];
  double rema[3];
  int used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = fr[i] * n;
    counts[i] = static_cast<int>(std::floor(exact));
    rema[i] = exact - counts[i];
    used += counts[i];
  }
  while (used < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (rema[i] > rema[best]) best = i;
    }
    ++counts[best];
    rema[best] = -1.0;
    ++used;
  }
  for (int c : counts) {
    if (c < 1) throw InputError("split: a part would be empty with n=" + std::to_string(n));
  }
  return {counts[0], counts[1], counts[2]};
}

void split_axis(int n, const SplitFractions& f, Rng& rng, std::vector<int>& train,
                std::vector<int>& val, std::vector<int>& test) {
  const std::vector<int> counts = partition_counts(n, f);
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  rng.shuffle(idx);
  auto it = idx.begin();
  train.assign(it, it + counts[0]);
  it += counts[0];
  val.assign(it, it + counts[1]);
  it += counts[1];
  test.assign(it, it + counts[2]);
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  std::sort(test.begin(), test.end());
}

}  // namespace

SplitSpec make_split(int class_count, int domain_count, const SplitFractions& class_fractions,
                     const SplitFractions& domain_fractions, std::uint64_t seed) {
  SplitSpec s;
  Rng class_rng(derive_seed(seed, 1));
  Rng domain_rng(derive_seed(seed, 2));
  split_axis(class_count, class_fractions, class_rng, s.train_classes, s.val_classes,
             s.test_classes);
  split_axis(domain_count, domain_fractions, domain_rng, s.train_domains, s.val_domains,
             s.test_domains);
  s.validate(class_count, domain_count);
  return s;
}

void save_split(const SplitSpec& split, const std::string& path) {
  json j;
  j["classes"] = {{"train", split.train_classes},
                  {"val", split.val_classes},
                  {"test", split.test_classes}};
  j["domains"] = {{"train", split.train_domains},
                  {"val", split.val_domains},
                  {"test", split.test_domains}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
}

SplitSpec load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed split " + path + ": " + e.what());
  }
  SplitSpec s;
  s.train_classes = j.at("classes").at("train").get<std::vector<int>>();
  s.val_classes = j.at("classes").at("val").get<std::vector<int>>();
  s.test_classes = j.at("classes").at("test").get<std::vector<int>>();
  s.train_domains = j.at("domains").at("train").get<std::vector<int>>();
  s.val_domains = j.at("domains").at("val").get<std::vector<int>>();
  s.test_domains = j.at("domains").at("test").get<std::vector<int>>();
  return s;
}

Episode sample_episode(const GridDataset& ds, const SplitSpec& split, SplitPart part,
                       const EpisodeConfig& config, std::uint64_t seed) {
  if (config.n_way < 2) throw InputError("episode: n_way must be >= 2");
  if (config.k_shot < 1 || config.q_per_class < 1) {
    throw InputError("episode: k_shot and q_per_class must be >= 1");
  }
  const std::vector<int>& part_classes = split.classes(part);
  const std::vector<int>& part_domains = split.domains(part);
  if (static_cast<int>(part_classes.size()) < config.n_way) {
    throw InputError("episode: split part has " + std::to_string(part_classes.size()) +
                     " classes, need n_way=" + std::to_string(config.n_way));
  }
  if (config.shifted && part_domains.size() < 2) {
    throw InputError("episode: shifted sampling needs >= 2 domains in the split part");
  }
  if (part_domains.empty()) throw InputError("episode: split part has no domains");

  Rng rng(seed);
  Episode ep;

  const std::vector<int> class_pick =
      rng.sample_without_replacement(static_cast<int>(part_classes.size()), config.n_way);
  for (int idx : class_pick) ep.class_ids.push_back(part_classes[static_cast<std::size_t>(idx)]);

  const auto n_domains = static_cast<std::uint64_t>(part_domains.size());
  ep.source_domain = part_domains[rng.uniform_int(n_domains)];
  if (config.shifted) {
    do {
      ep.target_domain = part_domains[rng.uniform_int(n_domains)];
    } while (ep.target_domain == ep.source_domain);
  } else {
    ep.target_domain = ep.source_domain;
  }

  const int d = ds.d_in();
  ep.support_features = Matrix(config.n_way * config.k_shot, d);
  ep.query_features = Matrix(config.n_way * config.q_per_class, d);

  auto require = [&](int domain, int class_id, int need) {
    const CellIndex& c = ds.cell(domain, class_id);
    if (c.count < need) {
      throw InputError("episode: cell (domain=" + std::to_string(domain) +
                       ", class=" + std::to_string(class_id) + ") has " +
                       std::to_string(c.count) + " items, need " + std::to_string(need));
    }
  };

  int s_row = 0, q_row = 0;
  for (int label = 0; label < config.n_way; ++label) {
    const int class_id = ep.class_ids[static_cast<std::size_t>(label)];
    std::vector<int> support_items, query_items;
    if (ep.source_domain == ep.target_domain) {
      const int need = config.k_shot + config.q_per_class;
      require(ep.source_domain, class_id, need);
      const CellIndex& c = ds.cell(ep.source_domain, class_id);
      const std::vector<int> picked = rng.sample_without_replacement(c.count, need);
      support_items.assign(picked.begin(), picked.begin() + config.k_shot);
      query_items.assign(picked.begin() + config.k_shot, picked.end());
    } else {
      require(ep.source_domain, class_id, config.k_shot);
      require(ep.target_domain, class_id, config.q_per_class);
      support_items = rng.sample_without_replacement(ds.cell(ep.source_domain, class_id).count,
                                                     config.k_shot);
      query_items = rng.sample_without_replacement(ds.cell(ep.target_domain, class_id).count,
                                                   config.q_per_class);
    }

    const Matrix s_cell = ds.cell_features(ep.source_domain, class_id);
    for (int item : support_items) {
      ep.support_features.row(s_row++) = s_cell.row(item);
      ep.support_labels.push_back(label);
    }
    const Matrix q_cell = ds.cell_features(ep.target_domain, class_id);
    for (int item : query_items) {
      ep.query_features.row(q_row++) = q_cell.row(item);
      ep.query_labels.push_back(label);
    }
  }
  return ep;
}

}  // namespace fsqs
