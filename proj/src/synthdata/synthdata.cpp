#include "regseg/synthdata.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "regseg/parallel.hpp"
#include "regseg/raster.hpp"
#include "regseg/rng.hpp"
#include "regseg/tape.hpp"
#include "regseg/warp.hpp"

namespace regseg::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool inside_ellipse(double y, double x, double cy, double cx, double ry, double rx, double angle) {
  const double dy = y - cy, dx = x - cx;
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = dy * c + dx * s;
  const double v = -dy * s + dx * c;
  return (u * u) / (ry * ry) + (v * v) / (rx * rx) <= 1.0;
}

bool inside_distractor(const Distractor& d, double y, double x, double oy, double ox) {
  const double cy = d.cy + oy, cx = d.cx + ox;
  if (d.kind == Distractor::Kind::blob) return inside_ellipse(y, x, cy, cx, d.ry, d.rx, d.angle);
  const double r = std::hypot(y - cy, x - cx);
  if (std::abs(r - d.ry) > d.rx) return false;
  double t = std::atan2(y - cy, x - cx) - d.angle;
  t = std::fmod(t, 2 * M_PI);
  if (t < 0) t += 2 * M_PI;
  return t <= d.span;
}

// Template-space rendering: intensity image and integer structure ids.
void render_structures(const SceneTemplate& tmpl, const std::vector<double>& intensities,
                       Grid<float>& image, std::vector<int>& ids) {
  const int H = tmpl.height, W = tmpl.width;
  image = Grid<float>(Shape{1, H, W}, static_cast<float>(tmpl.background));
  ids.assign(static_cast<std::size_t>(H) * W, 0);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      for (int k = 0; k < tmpl.num_structures(); ++k) {
        const Ellipse& e = tmpl.structures[static_cast<std::size_t>(k)];
        if (inside_ellipse(i, j, e.cy, e.cx, e.ry, e.rx, e.angle)) {
          ids[static_cast<std::size_t>(i) * W + j] = k + 1;
          image.at(0, i, j) = static_cast<float>(intensities[static_cast<std::size_t>(k)]);
        }
      }
}

Grid<float> one_hot(const std::vector<int>& ids, int classes, int H, int W) {
  Grid<float> label(Shape{classes, H, W}, 0.0f);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) label.at(ids[static_cast<std::size_t>(i) * W + j], i, j) = 1.0f;
  return label;
}

void paint_distractors(const SceneTemplate& tmpl, const std::vector<std::pair<double, double>>& offsets,
                       const std::vector<double>& intensities, const Grid<float>& label,
                       Grid<float>& image) {
  const int H = tmpl.height, W = tmpl.width;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      if (label.at(0, i, j) != 1.0f) continue;  // structures stay on top
      for (std::size_t d = 0; d < tmpl.distractors.size(); ++d)
        if (inside_distractor(tmpl.distractors[d], i, j, offsets[d].first, offsets[d].second))
          image.at(0, i, j) = static_cast<float>(intensities[d]);
    }
}

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0;
  for (int i = -r; i <= r; ++i) s += (k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k) v /= s;
  return k;
}

// Separable smoothing with clamp-to-edge borders.
void smooth_plane(std::vector<double>& plane, int H, int W, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(plane.size());
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double s = 0;
      for (int t = -r; t <= r; ++t)
        s += k[static_cast<std::size_t>(t + r)] * plane[static_cast<std::size_t>(i) * W + std::clamp(j + t, 0, W - 1)];
      tmp[static_cast<std::size_t>(i) * W + j] = s;
    }
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double s = 0;
      for (int t = -r; t <= r; ++t)
        s += k[static_cast<std::size_t>(t + r)] * tmp[static_cast<std::size_t>(std::clamp(i + t, 0, H - 1)) * W + j];
      plane[static_cast<std::size_t>(i) * W + j] = s;
    }
}

Sample generate_once(const SceneTemplate& tmpl, const GeneratorConfig& cfg, std::uint64_t seed) {
  const int H = tmpl.height, W = tmpl.width, K = tmpl.num_structures();
  Rng rng(seed);

  std::vector<double> s_int(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k)
    s_int[static_cast<std::size_t>(k)] =
        tmpl.structures[static_cast<std::size_t>(k)].intensity + uniform(rng, -cfg.intensity_jitter, cfg.intensity_jitter);
  std::vector<double> d_int(tmpl.distractors.size());
  std::vector<std::pair<double, double>> d_off(tmpl.distractors.size());
  for (std::size_t d = 0; d < tmpl.distractors.size(); ++d) {
    d_int[d] = tmpl.distractors[d].intensity + uniform(rng, -cfg.intensity_jitter, cfg.intensity_jitter);
    const double oy = uniform(rng, -cfg.distractor_jitter, cfg.distractor_jitter);
    const double ox = uniform(rng, -cfg.distractor_jitter, cfg.distractor_jitter);
    d_off[d] = {oy, ox};
  }
  const Grid<float> field = random_smooth_field(H, W, cfg.deform_amp, cfg.deform_smooth, derive_seed(seed, 1));

  Grid<float> base;
  std::vector<int> ids;
  render_structures(tmpl, s_int, base, ids);
  const Grid<float> label0 = one_hot(ids, K + 1, H, W);

  const warp::DisplacementField<float> phi(diff::Var<float>::constant(field));
  Grid<float> image = warp::warp_image(diff::Var<float>::constant(base), phi).value();
  Grid<float> label = warp::harden(warp::warp_label(diff::Var<float>::constant(label0), phi).value());

  paint_distractors(tmpl, d_off, d_int, label, image);
  if (cfg.noise_sigma > 0) {
    Rng noise_rng(derive_seed(seed, 2));
    for (float& v : image.values()) v += static_cast<float>(cfg.noise_sigma * normal(noise_rng));
  }
  for (float& v : image.values()) v = std::clamp(v, 0.0f, 1.0f);
  return Sample{std::move(image), std::move(label), seed};
}

}  // namespace

SceneTemplate SceneTemplate::standard(int height, int width, int structures, int distractors) {
  if (structures < 1 || structures > 3) throw std::invalid_argument("standard template supports 1..3 structures");
  if (distractors < 0 || distractors > 4) throw std::invalid_argument("standard template supports 0..4 distractors");
  const double sy = height / 64.0, sx = width / 64.0;
  SceneTemplate t;
  t.height = height;
  t.width = width;
  const Ellipse all_s[] = {
      {32, 30, 17, 13, 0.35, 0.50},   // outer wall
      {27, 27, 10, 8, 0.35, 0.90},    // cavity inside the wall
      {39, 36, 9, 8, -0.30, 0.72},    // second cavity straddling the wall
  };
  for (int k = 0; k < structures; ++k) {
    Ellipse e = all_s[k];
    e.cy *= sy, e.cx *= sx, e.ry *= sy, e.rx *= sx;
    t.structures.push_back(e);
  }
  using K = Distractor::Kind;
  const Distractor all_d[] = {
      {K::blob, 20, 7, 11, 5, 0.15, 0, 0.70},
      {K::blob, 46, 57, 10, 5, -0.2, 0, 0.60},
      {K::arc, 32, 32, 28, 1.8, -2.6, 1.7, 0.80},
      {K::arc, 32, 32, 27, 1.8, 0.7, 1.5, 0.65},
  };
  for (int d = 0; d < distractors; ++d) {
    Distractor x = all_d[d];
    x.cy *= sy, x.cx *= sx, x.ry *= sy, x.rx *= sx;
    t.distractors.push_back(x);
  }
  t.validate();
  return t;
}

void SceneTemplate::validate() const {
  if (height < 8 || width < 8) throw std::invalid_argument("template canvas too small");
  for (std::size_t a = 0; a < structures.size(); ++a) {
    const Ellipse& e = structures[a];
    if (e.ry <= 0 || e.rx <= 0) throw std::invalid_argument("structure axes must be positive");
    const double r = std::max(e.ry, e.rx);
    if (e.cy - r < 4 || e.cy + r > height - 1 - 4 || e.cx - r < 4 || e.cx + r > width - 1 - 4)
      throw std::invalid_argument("structure " + std::to_string(a + 1) + " violates the 4 px canvas margin");
    for (std::size_t b = 0; b < a; ++b) {
      const Ellipse& o = structures[b];
      if (o.cy == e.cy && o.cx == e.cx && o.ry == e.ry && o.rx == e.rx && o.angle == e.angle)
        throw std::invalid_argument("structures must be pairwise distinct");
    }
  }
}

Sample rasterize(const SceneTemplate& tmpl) {
  std::vector<double> s_int;
  for (const auto& e : tmpl.structures) s_int.push_back(e.intensity);
  std::vector<double> d_int;
  for (const auto& d : tmpl.distractors) d_int.push_back(d.intensity);
  Grid<float> image;
  std::vector<int> ids;
  render_structures(tmpl, s_int, image, ids);
  Grid<float> label = one_hot(ids, tmpl.num_classes(), tmpl.height, tmpl.width);
  paint_distractors(tmpl, std::vector<std::pair<double, double>>(tmpl.distractors.size(), {0.0, 0.0}),
                    d_int, label, image);
  return Sample{std::move(image), std::move(label), 0};
}

Grid<float> random_smooth_field(int height, int width, double amp, double smooth, std::uint64_t seed) {
  Grid<float> field(Shape{2, height, width}, 0.0f);
  if (amp <= 0) return field;
  Rng rng(seed);
  const auto kernel = gaussian_kernel(std::max(smooth, 1e-3));
  const std::size_t P = static_cast<std::size_t>(height) * width;
  std::vector<std::vector<double>> planes;
  double ms = 0;
  for (int c = 0; c < 2; ++c) {
    std::vector<double> plane(P);
    for (double& v : plane) v = normal(rng);
    smooth_plane(plane, height, width, kernel);
    planes.push_back(std::move(plane));
    for (double v : planes.back()) ms += v * v;
  }
  // amp is the RMS length of the displacement vector over the canvas.
  const double rms = std::sqrt(ms / static_cast<double>(P));
  const double gain = rms > 0 ? amp / rms : 0.0;
  for (int c = 0; c < 2; ++c)
    for (std::size_t p = 0; p < P; ++p) field[c * P + p] = static_cast<float>(planes[static_cast<std::size_t>(c)][p] * gain);
  return field;
}

std::vector<std::size_t> structure_pixel_counts(const Grid<float>& label) {
  const int C = label.channels();
  const std::size_t P = label.plane();
  std::vector<std::size_t> counts(static_cast<std::size_t>(C - 1), 0);
  for (int c = 1; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p)
      if (label[c * P + p] > 0.5f) ++counts[static_cast<std::size_t>(c - 1)];
  return counts;
}

Sample generate_sample(const SceneTemplate& tmpl, const GeneratorConfig& cfg, std::uint64_t seed) {
  tmpl.validate();
  std::uint64_t attempt_seed = seed;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    Sample s = generate_once(tmpl, cfg, attempt_seed);
    const auto counts = structure_pixel_counts(*s.label);
    if (std::all_of(counts.begin(), counts.end(), [](std::size_t n) { return n > 0; })) {
      s.seed = seed;
      return s;
    }
    attempt_seed = derive_seed(seed, 100 + static_cast<std::uint64_t>(attempt));
  }
  throw std::runtime_error("generate_sample: a structure left the canvas in every retry for seed " +
                           std::to_string(seed));
}

std::uint64_t sample_seed(std::uint64_t master, int split, int index) {
  return derive_seed(derive_seed(master, 0x5eed0000ULL + static_cast<std::uint64_t>(split)),
                     static_cast<std::uint64_t>(index));
}

namespace {

enum Split { kLabeled = 0, kUnlabeled = 1, kTest = 2 };

std::vector<std::pair<int, int>> cross_pairs(std::size_t a, std::size_t b) {
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j) out.emplace_back(static_cast<int>(i), static_cast<int>(j));
  return out;
}

SceneTemplate template_for(const DatasetConfig& c) {
  return SceneTemplate::standard(c.height, c.width, c.structures, c.distractors);
}

void check_counts(const DatasetConfig& c) {
  if (c.n_labeled < 1 || c.n_unlabeled < 1 || c.n_test < 1)
    throw std::invalid_argument("dataset counts must all be >= 1");
}

}  // namespace

InMemoryCorpus generate_corpus(const DatasetConfig& cfg) {
  check_counts(cfg);
  const SceneTemplate tmpl = template_for(cfg);
  InMemoryCorpus corpus;
  corpus.labeled.resize(static_cast<std::size_t>(cfg.n_labeled));
  corpus.unlabeled.resize(static_cast<std::size_t>(cfg.n_unlabeled));
  corpus.test.resize(static_cast<std::size_t>(cfg.n_test));
  std::vector<std::pair<std::vector<Sample>*, int>> jobs;
  for (int s = 0; s < 3; ++s) {
    auto* v = s == kLabeled ? &corpus.labeled : s == kUnlabeled ? &corpus.unlabeled : &corpus.test;
    for (std::size_t i = 0; i < v->size(); ++i) jobs.emplace_back(v, s * 1000000 + static_cast<int>(i));
  }
  parallel_for(jobs.size(), [&](std::size_t j) {
    auto [vec, code] = jobs[j];
    const int split = code / 1000000, idx = code % 1000000;
    (*vec)[static_cast<std::size_t>(idx)] = generate_sample(tmpl, cfg.generator, sample_seed(cfg.master_seed, split, idx));
  });
  for (auto& s : corpus.unlabeled) s.label.reset();
  return corpus;
}

DatasetManifest make_dataset(const DatasetConfig& cfg, const fs::path& out_dir, bool force) {
  check_counts(cfg);
  const fs::path manifest_path = out_dir / "manifest.json";
  if (fs::exists(manifest_path) && !force)
    throw std::runtime_error("manifest already exists at " + manifest_path.string() + " (use --force)");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + out_dir.string() + ": " + ec.message());
  for (const char* sub : {"labeled", "unlabeled", "test"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw std::runtime_error("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }

  const InMemoryCorpus corpus = generate_corpus(cfg);
  DatasetManifest m;
  m.corpus_id = cfg.corpus_id;
  m.master_seed = cfg.master_seed;
  m.height = cfg.height;
  m.width = cfg.width;
  m.structures = cfg.structures;
  m.distractors = cfg.distractors;
  m.generator = cfg.generator;
  m.root = out_dir;

  auto write_split = [&](const std::vector<Sample>& samples, const char* dir, std::vector<SampleEntry>& entries) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char stem[32];
      std::snprintf(stem, sizeof(stem), "%03zu", i);
      SampleEntry e;
      e.index = static_cast<int>(i);
      e.seed = samples[i].seed;
      e.image = std::string(dir) + "/" + stem + "_image.rsf";
      save_raster(samples[i].image, out_dir / e.image);
      if (samples[i].label) {
        e.label = std::string(dir) + "/" + stem + "_label.rsf";
        save_raster(*samples[i].label, out_dir / e.label);
      }
      entries.push_back(std::move(e));
    }
  };
  write_split(corpus.labeled, "labeled", m.labeled);
  write_split(corpus.unlabeled, "unlabeled", m.unlabeled);
  write_split(corpus.test, "test", m.test);
  m.train_pairs = cross_pairs(m.labeled.size(), m.unlabeled.size());
  for (std::size_t t = 0; t < m.test.size(); ++t)
    for (std::size_t l = 0; l < m.labeled.size(); ++l)
      m.test_pairs.emplace_back(static_cast<int>(t), static_cast<int>(l));

  std::set<std::uint64_t> train_seeds;
  for (const auto& e : m.labeled) train_seeds.insert(e.seed);
  for (const auto& e : m.unlabeled) train_seeds.insert(e.seed);
  for (const auto& e : m.test)
    if (train_seeds.count(e.seed)) throw std::logic_error("test seed collides with a training seed");

  std::ofstream os(manifest_path);
  if (!os) throw std::runtime_error("cannot write " + manifest_path.string());
  os << m.to_json().dump(2) << '\n';
  return m;
}

DatasetConfig DatasetManifest::config() const {
  DatasetConfig c;
  c.corpus_id = corpus_id;
  c.master_seed = master_seed;
  c.n_labeled = static_cast<int>(labeled.size());
  c.n_unlabeled = static_cast<int>(unlabeled.size());
  c.n_test = static_cast<int>(test.size());
  c.height = height;
  c.width = width;
  c.structures = structures;
  c.distractors = distractors;
  c.generator = generator;
  return c;
}

DatasetManifest DatasetManifest::with_labeled_count(int n) const {
  if (n < 1 || n > static_cast<int>(labeled.size()))
    throw std::invalid_argument("labeled count " + std::to_string(n) + " exceeds the pool of " +
                                std::to_string(labeled.size()));
  DatasetManifest m = *this;
  m.labeled.resize(static_cast<std::size_t>(n));
  m.train_pairs = cross_pairs(m.labeled.size(), m.unlabeled.size());
  m.test_pairs.clear();
  for (std::size_t t = 0; t < m.test.size(); ++t)
    for (std::size_t l = 0; l < m.labeled.size(); ++l)
      m.test_pairs.emplace_back(static_cast<int>(t), static_cast<int>(l));
  return m;
}

Sample DatasetManifest::load(const SampleEntry& e, bool with_label) const {
  Sample s;
  s.seed = e.seed;
  s.image = load_raster(root / e.image);
  if (with_label && !e.label.empty()) s.label = load_raster(root / e.label);
  return s;
}

void to_json(json& j, const GeneratorConfig& g) {
  j = json{{"deform_amp", g.deform_amp},         {"deform_smooth", g.deform_smooth},
           {"intensity_jitter", g.intensity_jitter}, {"noise_sigma", g.noise_sigma},
           {"distractor_jitter", g.distractor_jitter}, {"max_retries", g.max_retries}};
}

void from_json(const json& j, GeneratorConfig& g) {
  g.deform_amp = j.value("deform_amp", g.deform_amp);
  g.deform_smooth = j.value("deform_smooth", g.deform_smooth);
  g.intensity_jitter = j.value("intensity_jitter", g.intensity_jitter);
  g.noise_sigma = j.value("noise_sigma", g.noise_sigma);
  g.distractor_jitter = j.value("distractor_jitter", g.distractor_jitter);
  g.max_retries = j.value("max_retries", g.max_retries);
}

void to_json(json& j, const DatasetConfig& c) {
  j = json{{"corpus_id", c.corpus_id}, {"master_seed", c.master_seed}, {"n_labeled", c.n_labeled},
           {"n_unlabeled", c.n_unlabeled}, {"n_test", c.n_test},       {"height", c.height},
           {"width", c.width},           {"structures", c.structures}, {"distractors", c.distractors},
           {"generator", c.generator}};
}

void from_json(const json& j, DatasetConfig& c) {
  c.corpus_id = j.value("corpus_id", c.corpus_id);
  c.master_seed = j.value("master_seed", c.master_seed);
  c.n_labeled = j.value("n_labeled", c.n_labeled);
  c.n_unlabeled = j.value("n_unlabeled", c.n_unlabeled);
  c.n_test = j.value("n_test", c.n_test);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.structures = j.value("structures", c.structures);
  c.distractors = j.value("distractors", c.distractors);
  if (j.contains("generator")) c.generator = j.at("generator").get<GeneratorConfig>();
}

namespace {

json entries_json(const std::vector<SampleEntry>& v) {
  json a = json::array();
  for (const auto& e : v) {
    json o{{"index", e.index}, {"seed", e.seed}, {"image", e.image}};
    o["label"] = e.label.empty() ? json(nullptr) : json(e.label);
    a.push_back(std::move(o));
  }
  return a;
}

std::vector<SampleEntry> entries_from(const json& a) {
  std::vector<SampleEntry> v;
  for (const auto& o : a) {
    SampleEntry e;
    e.index = o.at("index").get<int>();
    e.seed = o.at("seed").get<std::uint64_t>();
    e.image = o.at("image").get<std::string>();
    if (o.contains("label") && !o.at("label").is_null()) e.label = o.at("label").get<std::string>();
    v.push_back(std::move(e));
  }
  return v;
}

}  // namespace

json DatasetManifest::to_json() const {
  json j;
  j["corpus_id"] = corpus_id;
  j["generator_version"] = generator_version;
  j["master_seed"] = master_seed;
  j["canvas"] = {height, width};
  j["structures"] = structures;
  j["distractors"] = distractors;
  j["generator"] = generator;
  j["counts"] = {{"labeled", labeled.size()}, {"unlabeled", unlabeled.size()}, {"test", test.size()}};
  j["samples"] = {{"labeled", entries_json(labeled)},
                  {"unlabeled", entries_json(unlabeled)},
                  {"test", entries_json(test)}};
  j["train_pairs"] = train_pairs;
  j["test_pairs"] = test_pairs;
  return j;
}

DatasetManifest DatasetManifest::from_json(const json& j, fs::path root) {
  DatasetManifest m;
  m.corpus_id = j.at("corpus_id").get<std::string>();
  m.generator_version = j.at("generator_version").get<int>();
  if (m.generator_version != kGeneratorVersion)
    throw std::runtime_error("manifest generator version " + std::to_string(m.generator_version) +
                             " is not supported (expected " + std::to_string(kGeneratorVersion) + ")");
  m.master_seed = j.at("master_seed").get<std::uint64_t>();
  m.height = j.at("canvas").at(0).get<int>();
  m.width = j.at("canvas").at(1).get<int>();
  m.structures = j.at("structures").get<int>();
  m.distractors = j.at("distractors").get<int>();
  m.generator = j.at("generator").get<GeneratorConfig>();
  m.labeled = entries_from(j.at("samples").at("labeled"));
  m.unlabeled = entries_from(j.at("samples").at("unlabeled"));
  m.test = entries_from(j.at("samples").at("test"));
  m.train_pairs = j.at("train_pairs").get<std::vector<std::pair<int, int>>>();
  m.test_pairs = j.at("test_pairs").get<std::vector<std::pair<int, int>>>();
  m.root = std::move(root);
  return m;
}

DatasetManifest DatasetManifest::load_file(const fs::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return from_json(j, manifest_path.parent_path());
}

}  // namespace regseg::data
