#include <chrono>
#include <fstream>

#include "regseg/trainer.hpp"

namespace regseg::train {

namespace fs = std::filesystem;

template <typename T>
std::vector<PairData<T>> load_train_pairs(const data::DatasetManifest& m) {
  std::vector<Grid<T>> moving, labels, fixed;
  for (const auto& e : m.labeled) {
    const data::Sample s = m.load(e, true);
    if (!s.label) throw std::runtime_error("labeled sample " + e.image + " has no label file");
    moving.push_back(s.image.cast<T>());
    labels.push_back(s.label->template cast<T>());
  }
  for (const auto& e : m.unlabeled) fixed.push_back(m.load(e, false).image.cast<T>());
  std::vector<PairData<T>> out;
  for (const auto& [l, u] : m.train_pairs)
    out.push_back(PairData<T>{moving.at(static_cast<std::size_t>(l)), labels.at(static_cast<std::size_t>(l)),
                              fixed.at(static_cast<std::size_t>(u))});
  return out;
}

template std::vector<PairData<float>> load_train_pairs<float>(const data::DatasetManifest&);
template std::vector<PairData<double>> load_train_pairs<double>(const data::DatasetManifest&);

std::vector<std::size_t> epoch_order(std::uint64_t master_seed, int epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(derive_seed(master_seed, 0xE90C), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

RunResult run_training(const TrainConfig& cfg, const data::DatasetManifest& manifest, const RunOptions& opt) {
  cfg.validate();
  nets::require_compatible(cfg.arch, manifest.height, manifest.width);
  const auto pairs = load_train_pairs<float>(manifest);
  if (pairs.empty()) throw std::runtime_error("manifest lists no training pairs");

  Trainer<float> trainer(cfg, manifest.num_classes());
  std::error_code ec;
  fs::create_directories(opt.out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + opt.out_dir.string() + ": " + ec.message());
  if (opt.resume_from) load_checkpoint(trainer, manifest.corpus_id, *opt.resume_from, opt.allow_mismatch);
  {
    nlohmann::json j;
    j["train"] = trainer.config();
    j["corpus_id"] = manifest.corpus_id;
    j["version"] = REGSEG_VERSION;
    std::ofstream os(opt.out_dir / "config.json");
    os << j.dump(2) << '\n';
  }

  std::ofstream csv(opt.out_dir / "steps.csv", std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + (opt.out_dir / "steps.csv").string());
  csv << kStepLogHeader << '\n';

  RunResult res;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = pairs.size();
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  int cached_epoch = -1;
  std::vector<std::size_t> order;
  while (trainer.step() < cfg.steps) {
    std::vector<const PairData<float>*> batch;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t pos = static_cast<std::size_t>(trainer.step()) * B + b;
      const int epoch = static_cast<int>(pos / n);
      if (epoch != cached_epoch) {
        order = epoch_order(cfg.master_seed, epoch, n);
        cached_epoch = epoch;
      }
      batch.push_back(&pairs[order[pos % n]]);
    }
    const StepLog log = trainer.train_step(batch);
    csv << step_log_row(log) << '\n';
    res.logs.push_back(log);
    if (opt.on_step) opt.on_step(log);
    if (cfg.checkpoint_every > 0 && log.step % cfg.checkpoint_every == 0 && log.step < cfg.steps) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_%06d.ckpt", log.step);
      save_checkpoint(trainer, manifest.corpus_id, opt.out_dir / name);
    }
  }
  csv.flush();
  if (!csv) throw std::runtime_error("write failed for steps.csv");
  save_checkpoint(trainer, manifest.corpus_id, opt.out_dir / "final.ckpt");

  res.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::size_t tail = std::min<std::size_t>(100, res.logs.size());
  for (std::size_t i = res.logs.size() - tail; i < res.logs.size(); ++i) {
    res.tail_L_D += res.logs[i].L_D / static_cast<double>(tail);
    res.tail_confidence += res.logs[i].confidence / static_cast<double>(tail);
  }
  res.reg = trainer.reg;
  res.seg = trainer.seg;
  res.disc = trainer.disc;
  return res;
}

}  // namespace regseg::train
