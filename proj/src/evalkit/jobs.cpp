#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>

#include "regseg/evalkit.hpp"

namespace regseg::eval {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

RunRecord run_one(const train::TrainConfig& base, const data::DatasetManifest& m, const JobSpec& spec) {
  RunRecord rec;
  rec.arm = spec.arm;
  rec.labels = spec.labels;
  rec.seed = spec.seed;
  train::TrainConfig cfg = arm_config(base, spec.arm);
  cfg.master_seed = spec.seed;
  const data::DatasetManifest mm = spec.labels > 0 ? m.with_labeled_count(spec.labels) : m;
  train::RunOptions opt;
  opt.out_dir = spec.dir;
  const auto res = train::run_training(cfg, mm, opt);
  const TestSet ts = load_test_set(mm);
  rec.seg = evaluate_seg(res.seg, ts.test);
  rec.reg = evaluate_reg(res.reg, ts.pairs);
  for (MetricsRecord* r : {&rec.seg, &rec.reg}) {
    r->arm = spec.arm;
    r->seed = spec.seed;
    r->step = cfg.steps;
  }
  rec.steps = cfg.steps;
  rec.wall_s = res.wall_s;
  rec.tail_L_D = res.tail_L_D;
  rec.tail_confidence = res.tail_confidence;
  return rec;
}

void write_result(const RunRecord& r, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream os(dir / "result.json", std::ios::trunc);
  os << to_json(r).dump(2) << '\n';
}

RunRecord failed_record(const JobSpec& s, const std::string& why) {
  RunRecord r;
  r.arm = s.arm;
  r.labels = s.labels;
  r.seed = s.seed;
  r.error = why.empty() ? "unknown failure" : why;
  return r;
}

RunRecord run_guarded(const train::TrainConfig& base, const data::DatasetManifest& m, const JobSpec& s) {
  RunRecord r;
  try {
    r = run_one(base, m, s);
  } catch (const std::exception& e) {
    r = failed_record(s, e.what());
  }
  write_result(r, s.dir);
  return r;
}

std::optional<RunRecord> cached(const JobSpec& s, int steps) {
  const fs::path p = s.dir / "result.json";
  if (!fs::exists(p)) return std::nullopt;
  try {
    std::ifstream is(p);
    const RunRecord r = run_record_from_json(json::parse(is));
    if (r.error.empty() && r.steps == steps && r.arm == s.arm && r.seed == s.seed && r.labels == s.labels) return r;
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

std::string dir_name(std::string arm) {
  for (char& c : arm)
    if (c == '+') c = '_';
  return arm;
}

}  // namespace

std::vector<RunRecord> run_jobs(const train::TrainConfig& base, const data::DatasetManifest& m,
                                const std::vector<JobSpec>& specs, int jobs) {
  std::vector<std::optional<RunRecord>> out(specs.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    out[i] = cached(specs[i], base.steps);
    if (!out[i]) todo.push_back(i);
  }
  if (jobs <= 1) {
    for (std::size_t i : todo) out[i] = run_guarded(base, m, specs[i]);
  } else {
    std::map<pid_t, std::size_t> running;
    std::size_t next = 0;
    auto reap = [&] {
      int status = 0;
      const pid_t pid = ::wait(&status);
      if (pid <= 0) throw std::runtime_error("wait() failed while running jobs");
      const std::size_t i = running.at(pid);
      running.erase(pid);
      const fs::path p = specs[i].dir / "result.json";
      try {
        std::ifstream is(p);
        out[i] = run_record_from_json(json::parse(is));
      } catch (const std::exception&) {
        out[i] = failed_record(specs[i], "job process exited with status " + std::to_string(status));
      }
    };
    while (next < todo.size() || !running.empty()) {
      while (next < todo.size() && running.size() < static_cast<std::size_t>(jobs)) {
        const std::size_t i = todo[next++];
        std::cout.flush();
        const pid_t pid = ::fork();
        if (pid < 0) throw std::runtime_error("fork() failed");
        if (pid == 0) {
          const RunRecord r = run_guarded(base, m, specs[i]);
          std::_Exit(r.error.empty() ? 0 : 2);
        }
        running[pid] = i;
      }
      reap();
    }
  }
  std::vector<RunRecord> res;
  for (auto& r : out) res.push_back(std::move(*r));
  return res;
}

std::vector<AblationRow> ablate(const train::TrainConfig& base, const data::DatasetManifest& m,
                                const std::vector<std::string>& arms, int seeds, const fs::path& out, int jobs) {
  if (seeds < 1) throw std::invalid_argument("seeds must be >= 1");
  std::vector<JobSpec> specs;
  for (const auto& arm : arms) {
    arm_config(base, arm);
    for (int i = 0; i < seeds; ++i) {
      const std::uint64_t seed = base.master_seed + static_cast<std::uint64_t>(i);
      specs.push_back({arm, 0, seed, out / dir_name(arm) / ("seed_" + std::to_string(seed))});
    }
  }
  const auto recs = run_jobs(base, m, specs, jobs);
  std::vector<AblationRow> rows;
  json all = json::array();
  for (const auto& r : recs) {
    AblationRow row;
    row.arm = r.arm;
    row.seed = r.seed;
    row.failed = !r.error.empty();
    row.r_dice_mean = row.failed ? kNaN : r.reg.mean;
    row.r_dice_std = row.failed ? kNaN : r.reg.std;
    row.s_dice_mean = row.failed ? kNaN : r.seg.mean;
    row.s_dice_std = row.failed ? kNaN : r.seg.std;
    row.steps = r.steps;
    row.wall_s = r.wall_s;
    rows.push_back(row);
    all.push_back(to_json(r));
  }
  write_ablation_csv(rows, out / "ablation.csv");
  std::ofstream(out / "ablation_runs.json") << all.dump(2) << '\n';
  return rows;
}

std::vector<SweepRow> label_sweep(const train::TrainConfig& base, const data::DatasetManifest& m,
                                  const std::vector<int>& counts, int seeds, const fs::path& out, int jobs) {
  if (seeds < 1) throw std::invalid_argument("seeds must be >= 1");
  std::vector<JobSpec> specs;
  for (int n : counts) {
    m.with_labeled_count(n);  // validates against the pool
    for (const char* arm : {"full", "S"})
      for (int i = 0; i < seeds; ++i) {
        const std::uint64_t seed = base.master_seed + static_cast<std::uint64_t>(i);
        specs.push_back({arm, n, seed,
                         out / ("labels_" + std::to_string(n)) / dir_name(arm) / ("seed_" + std::to_string(seed))});
      }
  }
  const auto recs = run_jobs(base, m, specs, jobs);
  std::vector<SweepRow> rows;
  json all = json::array();
  for (const auto& r : recs) {
    SweepRow row;
    row.labels = r.labels;
    row.arm = r.arm;
    row.seed = r.seed;
    row.failed = !r.error.empty();
    row.s_dice_mean = row.failed ? kNaN : r.seg.mean;
    row.s_dice_std = row.failed ? kNaN : r.seg.std;
    rows.push_back(row);
    all.push_back(to_json(r));
  }
  write_sweep_csv(rows, out / "sweep.csv");
  std::ofstream(out / "sweep_runs.json") << all.dump(2) << '\n';
  return rows;
}

}  // namespace regseg::eval
