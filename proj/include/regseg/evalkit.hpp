#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "regseg/nets.hpp"
#include "regseg/synthdata.hpp"
#include "regseg/trainer.hpp"

namespace regseg::eval {

/// 2|G n P| / (|G| + |P|) in percent. Both empty -> 100, one empty -> 0.
/// Masks hold 0/1 values only.
double dice(const Grid<float>& g, const Grid<float>& p);

struct MetricsRecord {
  std::string arm;
  std::uint64_t seed = 0;
  int step = 0;
  std::vector<double> per_structure;  // mean Dice per structure over cases
  double mean = 0;                    // over every (case, structure) value
  double std = 0;                     // population std of the same values
  std::size_t cases = 0;
};

/// Aggregates a [case][structure] Dice table.
MetricsRecord aggregate(const std::vector<std::vector<double>>& table);

/// Argmax segmentation of `image` as a one-hot grid.
Grid<float> predict_labels(const nets::NetworkHandle<float>& seg, const Grid<float>& image);

MetricsRecord evaluate_seg(const nets::NetworkHandle<float>& seg, const std::vector<data::Sample>& test);

struct RegPair {
  const data::Sample* moving;
  const data::Sample* fixed;
};

/// Warps the moving label with the full predicted field (alpha = 1),
/// hardens it and scores it against the fixed label.
MetricsRecord evaluate_reg(const nets::NetworkHandle<float>& reg, const std::vector<RegPair>& pairs);

/// Same scoring for an explicitly supplied field per pair.
MetricsRecord evaluate_fields(const std::vector<RegPair>& pairs, const std::vector<Grid<float>>& fields);

/// Labeled test samples and the manifest's (test fixed, labeled moving) pairs.
struct TestSet {
  std::vector<data::Sample> test;
  std::vector<data::Sample> atlas;  // labeled moving images
  std::vector<RegPair> pairs;
};
TestSet load_test_set(const data::DatasetManifest& m);

// Ablation arms.
inline const std::vector<std::string> kArms = {"R", "S", "R+S", "R+S+DSS", "R+S+ACM", "R+S+DRC", "full"};
/// Sets the toggles of `base` for an arm; throws on an unknown name.
train::TrainConfig arm_config(const train::TrainConfig& base, const std::string& arm);
std::vector<std::string> parse_arms(const std::string& csv_list);

struct AblationRow {
  std::string arm;
  std::uint64_t seed = 0;
  double r_dice_mean = 0, r_dice_std = 0, s_dice_mean = 0, s_dice_std = 0;
  int steps = 0;
  double wall_s = 0;
  bool failed = false;
  bool operator==(const AblationRow&) const = default;
};

struct SweepRow {
  int labels = 0;
  std::string arm;
  std::uint64_t seed = 0;
  double s_dice_mean = 0, s_dice_std = 0;
  bool failed = false;
  bool operator==(const SweepRow&) const = default;
};

inline constexpr const char* kAblationHeader = "arm,seed,r_dice_mean,r_dice_std,s_dice_mean,s_dice_std,steps,wall_s";
inline constexpr const char* kSweepHeader = "labels,arm,seed,s_dice_mean,s_dice_std";

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);
std::vector<AblationRow> read_ablation_csv(const std::filesystem::path& path);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);
std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path);

/// Outcome of one training + evaluation job.
struct RunRecord {
  std::string arm;
  int labels = 0;
  std::uint64_t seed = 0;
  MetricsRecord reg, seg;
  int steps = 0;
  double wall_s = 0;
  double tail_L_D = 0, tail_confidence = 0;
  std::string error;  // non-empty when the run failed
};
nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);

struct JobSpec {
  std::string arm;
  int labels = 0;  // 0: use the manifest's full labeled pool
  std::uint64_t seed = 0;
  std::filesystem::path dir;
};

/// Trains and evaluates every job, at most `jobs` child processes at a time
/// (1 runs in-process). Each job writes result.json into its own directory;
/// a job whose result.json already exists is reused.
std::vector<RunRecord> run_jobs(const train::TrainConfig& base, const data::DatasetManifest& m,
                                const std::vector<JobSpec>& specs, int jobs);

/// Seeds are base.master_seed + i for i < seeds.
std::vector<AblationRow> ablate(const train::TrainConfig& base, const data::DatasetManifest& m,
                                const std::vector<std::string>& arms, int seeds, const std::filesystem::path& out,
                                int jobs);

/// Full model and seg-only baseline per label count.
std::vector<SweepRow> label_sweep(const train::TrainConfig& base, const data::DatasetManifest& m,
                                  const std::vector<int>& counts, int seeds, const std::filesystem::path& out,
                                  int jobs);

// Reports.
void write_records_json(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);
void write_records_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);

/// 8-bit P5 dump of a single plane. `unit` maps [0,1] linearly (clamped);
/// otherwise min-max normalized, a constant plane maps to 0. Values round
/// half up: 0.5 -> 128.
void write_pgm(const Grid<float>& plane, const std::filesystem::path& path, bool unit);
/// Pixel values of a P5 file with maxval 255.
std::vector<unsigned char> read_pgm(const std::filesystem::path& path, int& height, int& width);

}  // namespace regseg::eval
