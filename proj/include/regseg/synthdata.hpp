#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "regseg/grid.hpp"

namespace regseg::data {

inline constexpr int kGeneratorVersion = 1;

struct Ellipse {
  double cy, cx;  // center (row, column)
  double ry, rx;  // semi-axes before rotation
  double angle;   // radians
  double intensity;
};

struct Distractor {
  enum class Kind { blob, arc };
  Kind kind = Kind::blob;
  // blob: ellipse (cy, cx, ry, rx, angle). arc: ring of radius ry and half
  // thickness rx around (cy, cx), covering angles [angle, angle + span].
  double cy = 0, cx = 0, ry = 0, rx = 0, angle = 0, span = 0;
  double intensity = 0.5;
};

/// K structure ellipses painted in order over J background distractors.
struct SceneTemplate {
  int height = 64;
  int width = 64;
  double background = 0.1;
  std::vector<Ellipse> structures;
  std::vector<Distractor> distractors;

  int num_structures() const { return static_cast<int>(structures.size()); }
  int num_classes() const { return num_structures() + 1; }

  /// Heart-like nested layout scaled to the canvas; K <= 3, J <= 4.
  static SceneTemplate standard(int height = 64, int width = 64, int structures = 3, int distractors = 4);
  /// Structures distinct and inside the canvas with a 4 px margin.
  void validate() const;
};

struct GeneratorConfig {
  double deform_amp = 3.0;       // RMS displacement length, pixels
  double deform_smooth = 8.0;    // Gaussian sigma of the noise smoothing kernel, pixels
  double intensity_jitter = 0.1; // uniform +- per structure and distractor
  double noise_sigma = 0.02;     // additive Gaussian pixel noise
  double distractor_jitter = 6.0;  // uniform +- placement offset, pixels
  int max_retries = 8;
};

struct Sample {
  Grid<float> image;                 // [1,H,W] in [0,1]
  std::optional<Grid<float>> label;  // one-hot [C,H,W], channel 0 background
  std::uint64_t seed = 0;
};

/// Noise-free rendering of the template with distractors at nominal positions.
Sample rasterize(const SceneTemplate& tmpl);

/// Smooth random displacement field [2,H,W] (exposed for tests and tools).
Grid<float> random_smooth_field(int height, int width, double amp, double smooth, std::uint64_t seed);

/// Deterministic in (template, config, seed). Throws after max_retries when a
/// structure keeps vanishing.
Sample generate_sample(const SceneTemplate& tmpl, const GeneratorConfig& cfg, std::uint64_t seed);

/// Per-structure pixel counts of a one-hot label (background excluded).
std::vector<std::size_t> structure_pixel_counts(const Grid<float>& label);

struct DatasetConfig {
  std::string corpus_id = "synthetic-default";
  std::uint64_t master_seed = 7;
  int n_labeled = 4;
  int n_unlabeled = 20;
  int n_test = 16;
  int height = 64;
  int width = 64;
  int structures = 3;
  int distractors = 4;
  GeneratorConfig generator;
};

struct SampleEntry {
  int index = 0;
  std::uint64_t seed = 0;
  std::string image;  // relative to the manifest directory
  std::string label;  // empty when withheld
};

struct DatasetManifest {
  std::string corpus_id;
  int generator_version = kGeneratorVersion;
  std::uint64_t master_seed = 0;
  int height = 0, width = 0, structures = 0, distractors = 0;
  GeneratorConfig generator;
  std::vector<SampleEntry> labeled, unlabeled, test;
  std::vector<std::pair<int, int>> train_pairs;  // (labeled moving, unlabeled fixed)
  std::vector<std::pair<int, int>> test_pairs;   // (test fixed, labeled moving)
  std::filesystem::path root;                    // directory holding manifest.json

  int num_classes() const { return structures + 1; }
  DatasetConfig config() const;
  /// Restricts the labeled pool to its first n entries and rebuilds pair lists.
  DatasetManifest with_labeled_count(int n) const;

  Sample load(const SampleEntry& e, bool with_label = true) const;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j, std::filesystem::path root);
  static DatasetManifest load_file(const std::filesystem::path& manifest_path);
};

/// Seeds for each split are derived from the master seed.
std::uint64_t sample_seed(std::uint64_t master, int split, int index);

/// Writes the corpus and manifest.json into `out_dir`. Refuses to overwrite an
/// existing manifest unless `force`.
DatasetManifest make_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir,
                             bool force = false);

/// Generates the corpus in memory without touching disk (same seeds as make_dataset).
struct InMemoryCorpus {
  std::vector<Sample> labeled, unlabeled, test;
};
InMemoryCorpus generate_corpus(const DatasetConfig& cfg);

void to_json(nlohmann::json& j, const GeneratorConfig& g);
void from_json(const nlohmann::json& j, GeneratorConfig& g);
void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

}  // namespace regseg::data
