#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "regseg/losses.hpp"
#include "regseg/nets.hpp"
#include "regseg/optim.hpp"
#include "regseg/rng.hpp"
#include "regseg/synthdata.hpp"

namespace regseg::train {

struct TrainConfig {
  loss::LossWeights weights;
  nets::ArchConfig arch;
  diff::OptimizerSettings reg_opt{diff::OptimizerKind::rmsprop, 2e-4, 0.9, 0.9, 0.999, 1e-7};
  diff::OptimizerSettings disc_opt{diff::OptimizerKind::rmsprop, 2e-4, 0.9, 0.9, 0.999, 1e-7};
  diff::OptimizerSettings seg_opt{diff::OptimizerKind::adam, 2e-4, 0.9, 0.9, 0.999, 1e-8};
  int batch_size = 1;
  int steps = 2000;
  double beta = 0.1;  // reference fusion weight of the moving image
  int cc_window = 9;

  bool use_dss = true;
  bool use_acm = true;
  bool use_drc = true;
  bool joint = true;
  // Only read when joint is false: which single network the arm trains.
  bool train_reg = true;
  bool train_seg = true;
  // Seg-only arm: D+R steps (counted in `steps`) before the seg phase, which
  // then trains on moving images warped by the frozen field at random alpha.
  // 0 trains on the raw labeled images.
  int seg_only_reg_warmup = 500;

  std::uint64_t master_seed = 1;
  int checkpoint_every = 0;  // 0 disables intermediate checkpoints
  bool log_timing = false;   // ms column is 0 unless set, keeping logs byte-stable

  void validate() const;
  bool trains_reg() const { return joint || train_reg; }
  bool trains_seg() const { return joint || train_seg; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Every field is required; unknown keys are rejected.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// FNV-1a of the canonical JSON of every field that shapes the trajectory
/// (steps, checkpoint cadence and timing are excluded).
std::uint64_t config_hash(const TrainConfig& c, const std::string& corpus_id);

struct StepLog {
  int step = 0;
  double L_D = 0, L_adv = 0, L_drc = 0, L_cc = 0, L_R = 0, L_reg = 0;
  double L_acm = 0, L_ce = 0, L_seg = 0;
  std::array<double, 3> alpha{1.0, 1.0, 1.0};
  double ms = 0;
  double confidence = 0;  // mean discriminator output on warped pairs, not in the CSV
};

inline constexpr const char* kStepLogHeader =
    "step,L_D,L_adv,L_drc,L_cc,L_R,L_reg,L_acm,L_ce,L_seg,alpha1,alpha2,alpha3,ms";
std::string step_log_row(const StepLog& s);
StepLog parse_step_log_row(const std::string& line);
std::vector<StepLog> read_step_log(const std::filesystem::path& csv);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One training example: labeled moving image + label, fixed image.
template <typename T>
struct PairData {
  Grid<T> moving;
  Grid<T> moving_label;
  Grid<T> fixed;
};

template <typename T>
struct UpdateResult {
  double loss = 0;
  std::array<double, 4> parts{};  // reg: adv, drc, cc, smooth; seg: acm, ce
  double confidence = 0;
  diff::Gradients<T> grads;
};

template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, int num_classes);

  const TrainConfig& config() const { return cfg_; }
  int step() const { return step_; }

  nets::NetworkHandle<T> reg, seg, disc;
  diff::OptimizerState<T> reg_state, seg_state, disc_state;
  Rng rng;  // alpha draws

  /// Full D -> R -> S step on a batch of pairs. `alpha_override` replaces
  /// the three DSS draws (tests only).
  StepLog train_step(const std::vector<const PairData<T>*>& batch,
                     const std::optional<std::array<double, 3>>& alpha_override = std::nullopt);

  // The three sub-updates. Each computes its loss and gradients; `apply`
  // runs the optimizer on the owning network only.
  UpdateResult<T> disc_update(const std::vector<const PairData<T>*>& batch, const std::vector<double>& alphas,
                              bool apply);
  UpdateResult<T> reg_update(const std::vector<const PairData<T>*>& batch, const std::vector<double>& alphas,
                             bool apply);
  UpdateResult<T> seg_update(const std::vector<const PairData<T>*>& batch, const std::vector<double>& alphas,
                             bool apply, bool warped);

  /// Draws alpha ~ U[0,1] when DSS is on, otherwise 1.
  double draw_alpha();

  std::string rng_state() const;
  void set_rng_state(const std::string& s);
  void set_step(int s) { step_ = s; }

 private:
  TrainConfig cfg_;
  int step_ = 0;
};

// Checkpoints: "RSCKPT01", u64 header length, JSON header, then for each
// tensor listed in the header a u64 length followed by an RSF1 blob.
struct CheckpointInfo {
  int step = 0;
  std::uint64_t config_hash = 0;
  std::string rng_state;
  std::string corpus_id;
  std::string version;
};

class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const Trainer<float>& t, const std::string& corpus_id, const std::filesystem::path& path);
/// Restores networks, optimizer states, RNG and step counter into `t`.
/// Throws CheckpointMismatch when the stored hash differs and !allow_mismatch.
CheckpointInfo load_checkpoint(Trainer<float>& t, const std::string& corpus_id, const std::filesystem::path& path,
                               bool allow_mismatch = false);
/// Header only, plus the named tensors (used by inspect/eval).
CheckpointInfo read_checkpoint(const std::filesystem::path& path, std::map<std::string, Grid<float>>& tensors,
                               nlohmann::json* header = nullptr);

/// Loads every training pair of the manifest into memory.
template <typename T>
std::vector<PairData<T>> load_train_pairs(const data::DatasetManifest& m);

/// Position within the seeded per-epoch shuffle of `n` pairs.
std::vector<std::size_t> epoch_order(std::uint64_t master_seed, int epoch, std::size_t n);

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
  bool allow_mismatch = false;
  std::function<void(const StepLog&)> on_step;  // progress hook
};

struct RunResult {
  std::vector<StepLog> logs;
  double wall_s = 0;
  double tail_L_D = 0;         // mean over the last min(100, steps) logged steps
  double tail_confidence = 0;  // same window
  nets::NetworkHandle<float> reg, seg, disc;
};

/// Runs cfg.steps steps (resuming if requested), writing steps.csv,
/// config.json, checkpoints and final.ckpt into out_dir.
RunResult run_training(const TrainConfig& cfg, const data::DatasetManifest& manifest, const RunOptions& opt);

}  // namespace regseg::train
