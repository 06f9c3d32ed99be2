// regseg command-line entry point.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "regseg/evalkit.hpp"
#include "regseg/gradsuite.hpp"
#include "regseg/ops.hpp"
#include "regseg/parallel.hpp"
#include "regseg/raster.hpp"
#include "regseg/trainer.hpp"
#include "regseg/warp.hpp"

using namespace regseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config " + path + " is not valid JSON: " + e.what());
  }
}

// Every key of `user` must exist in `defaults` (recursively for objects).
void reject_unknown(const json& user, const json& defaults, const std::string& where) {
  if (!user.is_object()) return;
  for (const auto& [k, v] : user.items()) {
    if (!defaults.contains(k)) throw UsageError("unknown config key '" + where + k + "'");
    if (v.is_object() && defaults.at(k).is_object()) reject_unknown(v, defaults.at(k), where + k + ".");
  }
}

// key.sub=value; value parsed as JSON when possible, otherwise taken as a string.
void apply_override(json& j, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override '" + spec + "' is not key=value");
  const std::string key = spec.substr(0, eq), text = spec.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &j;
  std::stringstream ss(key);
  std::string part, path;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    path += (i ? "." : "") + parts[i];
    if (!node->is_object() || !node->contains(parts[i])) throw UsageError("unknown config key '" + path + "'");
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) throw UsageError("override '" + key + "' names a section, not a value");
  *node = value;
}

template <typename Config>
Config resolve(const std::string& config_path, const std::vector<std::string>& overrides) {
  json j = Config{};
  const json defaults = j;
  if (!config_path.empty()) {
    const json user = read_json_file(config_path);
    reject_unknown(user, defaults, "");
    j.merge_patch(user);
  }
  for (const auto& o : overrides) apply_override(j, o);
  try {
    return j.get<Config>();
  } catch (const std::exception& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
}

// Resolved configuration plus tool version, written before any work starts.
void write_provenance(const fs::path& out, const std::string& command, const json& config, const json& extra = {}) {
  fs::create_directories(out);
  json j{{"command", command}, {"version", REGSEG_VERSION}, {"config", config}};
  if (!extra.is_null())
    for (const auto& [k, v] : extra.items()) j[k] = v;
  std::ofstream os(out / "resolved_config.json");
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + (out / "resolved_config.json").string());
}

data::DatasetManifest load_manifest(const std::string& data_dir) {
  fs::path p = data_dir;
  if (fs::is_directory(p)) p /= "manifest.json";
  if (!fs::exists(p)) throw UsageError("no manifest at " + p.string());
  return data::DatasetManifest::load_file(p);
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

// Networks restored from a checkpoint, with the configuration they were trained under.
struct Restored {
  train::TrainConfig cfg;
  std::unique_ptr<train::Trainer<float>> trainer;
  train::CheckpointInfo info;
};

Restored restore(const fs::path& ckpt, const data::DatasetManifest& m) {
  Restored r;
  std::map<std::string, Grid<float>> tensors;
  json header;
  try {
    train::read_checkpoint(ckpt, tensors, &header);
    r.cfg = header.at("config").get<train::TrainConfig>();
  } catch (const std::exception& e) {
    std::ifstream in(ckpt, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    std::ostringstream msg;
    msg << e.what() << "\n  file: " << ckpt.string() << "\n  size: " << ss.str().size()
        << " bytes\n  fnv1a: " << hex64(fnv1a(ss.str()));
    if (header.contains("config_hash")) msg << "\n  stored config hash: " << header["config_hash"].get<std::string>();
    throw std::runtime_error(msg.str());
  }
  r.trainer = std::make_unique<train::Trainer<float>>(r.cfg, m.num_classes());
  r.info = train::load_checkpoint(*r.trainer, m.corpus_id, ckpt, true);
  if (r.info.corpus_id != m.corpus_id)
    std::cerr << "warning: checkpoint trained on corpus '" << r.info.corpus_id << "', evaluating on '" << m.corpus_id
              << "'\n";
  return r;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("'" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw UsageError("empty list");
  return out;
}

// ---- subcommands ----

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--config", c.config, "JSON config file (missing keys take defaults)")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "Dotted override key=value, repeatable");
  auto* o = app->add_option("--out", c.out, "Output directory");
  if (out_required) o->required();
  app->add_option("--seed", c.seed, "Master seed; all randomness derives from it");
}

int cmd_gen_data(const Common& c, bool force) {
  auto cfg = resolve<data::DatasetConfig>(c.config, c.overrides);
  if (c.seed) cfg.master_seed = *c.seed;
  if (!force && fs::exists(fs::path(c.out) / "manifest.json"))
    throw UsageError("corpus already exists at " + c.out + " (use --force)");
  write_provenance(c.out, "gen-data", cfg);
  const auto m = data::make_dataset(cfg, c.out, force);
  std::cout << "wrote " << m.labeled.size() << " labeled, " << m.unlabeled.size() << " unlabeled, " << m.test.size()
            << " test samples (" << m.train_pairs.size() << " training pairs) to " << c.out << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& resume, bool allow_mismatch,
              int log_every) {
  auto cfg = resolve<train::TrainConfig>(c.config, c.overrides);
  if (c.seed) cfg.master_seed = *c.seed;
  const auto m = load_manifest(data_dir);
  write_provenance(c.out, "train", cfg, json{{"data", data_dir}, {"corpus_id", m.corpus_id}});
  train::RunOptions opt;
  opt.out_dir = c.out;
  if (!resume.empty()) opt.resume_from = resume;
  opt.allow_mismatch = allow_mismatch;
  opt.on_step = [&](const train::StepLog& s) {
    if (log_every > 0 && s.step % log_every == 0)
      std::printf("step %d  L_D %.4f  L_reg %.4f  L_seg %.4f\n", s.step, s.L_D, s.L_reg, s.L_seg), std::fflush(stdout);
  };
  const auto r = train::run_training(cfg, m, opt);
  std::printf("done: %zu steps in %.1fs, tail L_D %.4f, tail confidence %.4f\n", r.logs.size(), r.wall_s, r.tail_L_D,
              r.tail_confidence);
  return 0;
}

int cmd_eval(const Common& c, const std::string& data_dir, const std::string& ckpt) {
  const auto m = load_manifest(data_dir);
  const auto r = restore(ckpt, m);
  write_provenance(c.out, "eval", r.cfg, json{{"data", data_dir}, {"checkpoint", ckpt}});
  const auto ts = eval::load_test_set(m);
  auto seg = eval::evaluate_seg(r.trainer->seg, ts.test);
  auto reg = eval::evaluate_reg(r.trainer->reg, ts.pairs);
  auto base = eval::evaluate_fields(ts.pairs, std::vector<Grid<float>>(ts.pairs.size(), Grid<float>(Shape{2, m.height, m.width}, 0.f)));
  for (auto* rec : {&seg, &reg, &base}) {
    rec->seed = r.cfg.master_seed;
    rec->step = r.info.step;
  }
  seg.arm = "seg";
  reg.arm = "reg";
  base.arm = "unregistered";
  eval::write_records_json({seg, reg, base}, fs::path(c.out) / "metrics.json");
  eval::write_records_csv({seg, reg, base}, fs::path(c.out) / "metrics.csv");
  std::printf("S-Dice %.2f +- %.2f  R-Dice %.2f +- %.2f  (unregistered %.2f)\n", seg.mean, seg.std, reg.mean, reg.std,
              base.mean);
  return 0;
}

int cmd_ablate(const Common& c, const std::string& data_dir, const std::string& arms_csv, int seeds, int jobs) {
  auto cfg = resolve<train::TrainConfig>(c.config, c.overrides);
  if (c.seed) cfg.master_seed = *c.seed;
  std::vector<std::string> arms;
  try {
    arms = eval::parse_arms(arms_csv);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (seeds < 1) throw UsageError("--seeds must be >= 1");
  const auto m = load_manifest(data_dir);
  write_provenance(c.out, "ablate", cfg, json{{"data", data_dir}, {"arms", arms}, {"seeds", seeds}});
  const auto rows = eval::ablate(cfg, m, arms, seeds, c.out, jobs);
  for (const auto& r : rows)
    std::printf("%-8s seed %-3" PRIu64 " R-Dice %6.2f  S-Dice %6.2f%s\n", r.arm.c_str(), r.seed, r.r_dice_mean,
                r.s_dice_mean, r.failed ? "  FAILED" : "");
  std::cout << "wrote " << (fs::path(c.out) / "ablation.csv").string() << "\n";
  for (const auto& r : rows)
    if (r.failed) return 2;
  return 0;
}

int cmd_sweep(const Common& c, const std::string& data_dir, const std::string& counts_csv, int seeds, int jobs) {
  auto cfg = resolve<train::TrainConfig>(c.config, c.overrides);
  if (c.seed) cfg.master_seed = *c.seed;
  const auto counts = parse_int_list(counts_csv);
  if (seeds < 1) throw UsageError("--seeds must be >= 1");
  const auto m = load_manifest(data_dir);
  for (int n : counts)
    if (n < 1 || n > static_cast<int>(m.labeled.size()))
      throw UsageError("label count " + std::to_string(n) + " outside 1.." + std::to_string(m.labeled.size()));
  write_provenance(c.out, "sweep", cfg, json{{"data", data_dir}, {"counts", counts}, {"seeds", seeds}});
  const auto rows = eval::label_sweep(cfg, m, counts, seeds, c.out, jobs);
  for (const auto& r : rows)
    std::printf("labels %-3d %-5s seed %-3" PRIu64 " S-Dice %6.2f%s\n", r.labels, r.arm.c_str(), r.seed, r.s_dice_mean,
                r.failed ? "  FAILED" : "");
  for (const auto& r : rows)
    if (r.failed) return 2;
  return 0;
}

int cmd_gradcheck(int size, double eps, const std::string& out, std::uint64_t seed) {
  if (size < 4) throw UsageError("--size must be >= 4");
  if (!(eps > 0)) throw UsageError("--eps must be positive");
  const double tol = 1e-4;
  const json cfg{{"size", size}, {"eps", eps}, {"seed", seed}, {"tolerance", tol}};
  if (!out.empty()) write_provenance(out, "gradcheck", cfg);
  const auto entries = loss::gradient_suite(size, eps, seed);
  bool ok = true;
  json report = json::array();
  for (const auto& e : entries) {
    const bool pass = e.max_rel_error < tol;
    ok = ok && pass;
    char line[160];
    std::snprintf(line, sizeof(line), "%-12s max rel error %.3e  (%zu probes)  %s", e.name.c_str(), e.max_rel_error,
                  e.probed, pass ? "ok" : "FAIL");
    std::cout << line << "\n";
    report.push_back({{"name", e.name}, {"max_rel_error", e.max_rel_error}, {"probed", e.probed}, {"pass", pass}});
  }
  if (!out.empty()) std::ofstream(fs::path(out) / "gradcheck.json") << report.dump(2) << '\n';
  return ok ? 0 : 2;
}

// Panels along the displacement path of one test pair.
int cmd_inspect(const Common& c, const std::string& data_dir, const std::string& ckpt, int pair_index) {
  const auto m = load_manifest(data_dir);
  const auto r = restore(ckpt, m);
  const auto ts = eval::load_test_set(m);
  if (pair_index < 0 || pair_index >= static_cast<int>(ts.pairs.size()))
    throw UsageError("--pair must be in 0.." + std::to_string(ts.pairs.size() - 1));
  write_provenance(c.out, "inspect", r.cfg, json{{"data", data_dir}, {"checkpoint", ckpt}, {"pair", pair_index}});
  const fs::path out = c.out;
  const auto& pair = ts.pairs[static_cast<std::size_t>(pair_index)];
  const Grid<float>& xm = pair.moving->image;
  const Grid<float>& xf = pair.fixed->image;
  const auto& t = *r.trainer;
  const int C = m.num_classes();
  const auto cst = [](const Grid<float>& g) { return diff::Var<float>::constant(g); };

  const Grid<float> phi = t.reg.forward(diff::concat_channels(cst(xm), cst(xf)), false).value();
  const std::size_t P = xm.plane();
  float max_mag = 0;
  for (std::size_t p = 0; p < P; ++p) max_mag = std::max(max_mag, std::hypot(phi[p], phi[P + p]));

  eval::write_pgm(xm, out / "moving.pgm", true);
  eval::write_pgm(xf, out / "fixed.pgm", true);
  json panels = json::array();
  for (int a100 : {0, 25, 50, 75, 100}) {
    const double alpha = a100 / 100.0;
    char tag[8];
    std::snprintf(tag, sizeof(tag), "a%03d", a100);
    const auto field = warp::scale_field(warp::DisplacementField<float>(cst(phi)), alpha);
    const Grid<float> xw = warp::warp_image(cst(xm), field).value();
    Grid<float> mag(Shape{1, xm.height(), xm.width()}, 0.f);
    for (std::size_t p = 0; p < P; ++p)
      mag[p] = max_mag > 0 ? std::hypot(field.value()[p], field.value()[P + p]) / max_mag : 0.f;
    const Grid<float> conf = t.disc.forward(diff::concat_channels(cst(xw), cst(xf)), false).value();
    const Grid<float> hard = eval::predict_labels(t.seg, xw);
    Grid<float> overlay(Shape{1, xm.height(), xm.width()}, 0.f);
    for (std::size_t p = 0; p < P; ++p)
      for (int k = 1; k < C; ++k)
        if (hard[static_cast<std::size_t>(k) * P + p] > 0.5f) overlay[p] = static_cast<float>(k) / static_cast<float>(C - 1);
    eval::write_pgm(xw, out / (std::string("warped_") + tag + ".pgm"), true);
    eval::write_pgm(mag, out / (std::string("field_") + tag + ".pgm"), true);
    eval::write_pgm(conf, out / (std::string("confidence_") + tag + ".pgm"), true);
    eval::write_pgm(overlay, out / (std::string("seg_") + tag + ".pgm"), true);
    double mad = 0, mean_conf = 0;
    for (std::size_t p = 0; p < P; ++p) mad += std::abs(xw[p] - xf[p]), mean_conf += conf[p];
    panels.push_back({{"alpha", alpha},
                      {"tag", tag},
                      {"mean_abs_diff_to_fixed", mad / static_cast<double>(P)},
                      {"mean_confidence", mean_conf / static_cast<double>(P)}});
    std::printf("alpha %.2f  mean |warped - fixed| %.5f  mean confidence %.4f\n", alpha, mad / static_cast<double>(P),
                mean_conf / static_cast<double>(P));
  }
  std::ofstream(out / "inspect.json") << json{{"step", r.info.step}, {"pair", pair_index}, {"panels", panels}}.dump(2)
                                      << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"regseg: joint registration and segmentation on synthetic 2-D scenes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(REGSEG_VERSION));

  Common gen, tr, ev, ab, sw, ins;
  bool force = false;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic corpus and its manifest");
  add_common(g, gen);
  g->add_flag("--force", force, "Overwrite an existing corpus");

  std::string data_dir, resume, ckpt, arms = "R,S,R+S,R+S+DSS,R+S+ACM,R+S+DRC,full", counts = "1,10";
  bool allow_mismatch = false;
  int log_every = 100, seeds = 3, jobs = thread_budget(), pair = 0;
  auto* t = app.add_subcommand("train", "Train one configuration");
  add_common(t, tr);
  t->add_option("--data", data_dir, "Corpus directory or manifest")->required();
  t->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  t->add_flag("--allow-mismatch", allow_mismatch, "Resume even if the config hash differs");
  t->add_option("--log-every", log_every, "Progress line cadence (0 silences)");

  auto* e = app.add_subcommand("eval", "Score a checkpoint on the test split");
  add_common(e, ev);
  e->add_option("--data", data_dir, "Corpus directory or manifest")->required();
  e->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);

  auto* a = app.add_subcommand("ablate", "Train and score every arm over several seeds");
  add_common(a, ab);
  a->add_option("--data", data_dir, "Corpus directory or manifest")->required();
  a->add_option("--arms", arms, "Comma-separated arms");
  a->add_option("--seeds", seeds, "Seeds per arm (master seed + i)");
  a->add_option("--jobs", jobs, "Parallel training processes (default: REGSEG_THREADS or core count)");

  auto* s = app.add_subcommand("sweep", "Full model vs seg-only baseline over labeled-pool sizes");
  add_common(s, sw);
  s->add_option("--data", data_dir, "Corpus directory or manifest")->required();
  s->add_option("--counts", counts, "Comma-separated label counts");
  s->add_option("--seeds", seeds, "Seeds per count");
  s->add_option("--jobs", jobs, "Parallel training processes");

  int size = 16;
  double eps = 1e-5;
  std::string gc_out;
  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss");
  gc->add_option("--size", size, "Instance height and width");
  gc->add_option("--eps", eps, "Central-difference step");
  gc->add_option("--out", gc_out, "Optional report directory");
  gc->add_option("--seed", gc_seed, "Instance seed");

  auto* in = app.add_subcommand("inspect", "Dump PGM panels along the displacement path");
  add_common(in, ins);
  in->add_option("--data", data_dir, "Corpus directory or manifest")->required();
  in->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  in->add_option("--pair", pair, "Test pair index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err, std::cerr, std::cerr);
    return 1;
  }

  try {
    if (*g) return cmd_gen_data(gen, force);
    if (*t) return cmd_train(tr, data_dir, resume, allow_mismatch, log_every);
    if (*e) return cmd_eval(ev, data_dir, ckpt);
    if (*a) return cmd_ablate(ab, data_dir, arms, seeds, jobs);
    if (*s) return cmd_sweep(sw, data_dir, counts, seeds, jobs);
    if (*gc) return cmd_gradcheck(size, eps, gc_out, gc_seed);
    if (*in) return cmd_inspect(ins, data_dir, ckpt, pair);
  } catch (const UsageError& u) {
    std::cerr << "usage error: " << u.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 1;
}
