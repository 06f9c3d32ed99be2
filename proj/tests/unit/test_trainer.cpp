#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "oracles.hpp"
#include "regseg/ops.hpp"
#include "regseg/raster.hpp"
#include "regseg/trainer.hpp"
#include "regseg/warp.hpp"

using namespace regseg;
using namespace regseg::train;
namespace fs = std::filesystem;
using testutil::bit_equal;
using testutil::random_grid;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.arch.base_channels = 4;
  c.arch.levels = 2;
  c.master_seed = 3;
  return c;
}

template <typename T>
PairData<T> toy_pair(std::uint64_t seed, int n = 16) {
  return PairData<T>{random_grid<T>(Shape{1, n, n}, seed, 0, 1), testutil::random_onehot<T>(4, n, n, seed + 1),
                     random_grid<T>(Shape{1, n, n}, seed + 2, 0, 1)};
}

template <typename T>
bool same_params(const diff::ParamSet<T>& a, const diff::ParamSet<T>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [k, v] : a)
    if (!bit_equal(v, b.at(k))) return false;
  return true;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("regseg_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 32x32 corpus shared by the run-level tests.
const data::DatasetManifest& corpus() {
  static const data::DatasetManifest m = [] {
    data::DatasetConfig c;
    c.n_labeled = 2;
    c.n_unlabeled = 3;
    c.n_test = 2;
    c.height = c.width = 32;
    return data::make_dataset(c, scratch("corpus"), true);
  }();
  return m;
}

Grid<double> warp_img(const Grid<double>& img, const Grid<double>& field, double alpha) {
  const auto f = warp::scale_field(warp::DisplacementField<double>(diff::Var<double>::constant(field)), alpha);
  return warp::warp_image(diff::Var<double>::constant(img), f).value();
}

Grid<double> warp_lab(const Grid<double>& lab, const Grid<double>& field, double alpha) {
  const auto f = warp::scale_field(warp::DisplacementField<double>(diff::Var<double>::constant(field)), alpha);
  return warp::warp_label(diff::Var<double>::constant(lab), f).value();
}

Grid<double> run(const nets::NetworkHandle<double>& net, const Grid<double>& x) {
  return net.forward(diff::Var<double>::constant(x), false).value();
}

Grid<double> cat(const Grid<double>& a, const Grid<double>& b) {
  return diff::concat_channels(diff::Var<double>::constant(a), diff::Var<double>::constant(b)).value();
}

}  // namespace

TEST_CASE("config validation and JSON") {
  const TrainConfig c = tiny_config();
  nlohmann::json j = c;
  TrainConfig back;
  from_json(j, back);
  CHECK(nlohmann::json(back) == j);
  CHECK(config_hash(back, "x") == config_hash(c, "x"));
  CHECK(config_hash(c, "x") != config_hash(c, "y"));
  TrainConfig longer = c;
  longer.steps = 99;
  longer.checkpoint_every = 5;
  CHECK(config_hash(longer, "x") == config_hash(c, "x"));
  TrainConfig other = c;
  other.beta = 0.2;
  CHECK(config_hash(other, "x") != config_hash(c, "x"));

  nlohmann::json extra = j;
  extra["bogus"] = 1;
  CHECK_THROWS(from_json(extra, back));
  nlohmann::json missing = j;
  missing.erase("beta");
  CHECK_THROWS(from_json(missing, back));

  TrainConfig bad = c;
  bad.beta = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.joint = false;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);  // must pick exactly one network
  bad.train_seg = false;
  CHECK_NOTHROW(bad.validate());
}

TEST_CASE("step log rows") {
  StepLog s;
  s.step = 7;
  s.L_D = 1.25;
  s.L_cc = -0.123456789;
  s.alpha = {0.1, 0.2, 0.3};
  const auto back = parse_step_log_row(step_log_row(s));
  CHECK(back.step == 7);
  CHECK(back.L_D == 1.25);
  CHECK(back.L_cc == doctest::Approx(-0.123456789).epsilon(1e-9));
  CHECK(back.alpha[2] == doctest::Approx(0.3));
  CHECK_THROWS(parse_step_log_row("1,2,3"));
}

TEST_CASE("epoch order is a seeded permutation") {
  const auto a = epoch_order(5, 0, 80);
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 80);
  CHECK(a == epoch_order(5, 0, 80));
  CHECK(a != epoch_order(5, 1, 80));
  CHECK(a != epoch_order(6, 0, 80));
}

TEST_CASE("zero learning rates leave every parameter unchanged") {
  TrainConfig c = tiny_config();
  c.reg_opt.learning_rate = c.seg_opt.learning_rate = c.disc_opt.learning_rate = 0;
  Trainer<float> t(c, 4);
  const auto reg0 = t.reg.params, seg0 = t.seg.params, disc0 = t.disc.params;
  const auto p = toy_pair<float>(1);
  for (int i = 0; i < 3; ++i) {
    const StepLog log = t.train_step({&p});
    CHECK(std::isfinite(log.L_reg));
    CHECK(log.L_D > 0);
    CHECK(log.L_ce > 0);
  }
  CHECK(same_params(t.reg.params, reg0));
  CHECK(same_params(t.seg.params, seg0));
  CHECK(same_params(t.disc.params, disc0));
}

TEST_CASE("one scripted step matches the composed loss oracles") {
  TrainConfig c = tiny_config();
  c.weights = {0.5, 2.0, 1.5, 0.7, 0.8, 1.2};
  c.beta = 0.25;
  c.cc_window = 5;
  Trainer<double> t(c, 4);
  // Start from a non-zero field.
  t.reg.params.at("head.weight") = random_grid(t.reg.params.at("head.weight").shape(), 5, -0.3, 0.3);
  t.reg.params.at("head.bias") = random_grid(Shape{2}, 6, -0.5, 0.5);
  const auto p = toy_pair<double>(11);
  const auto reg0 = t.reg, seg0 = t.seg, disc0 = t.disc;
  const std::array<double, 3> alpha{0.3, 0.6, 0.8};

  const StepLog log = t.train_step({&p}, alpha);
  const auto& reg1 = t.reg;
  const auto& disc1 = t.disc;

  const auto phi0 = run(reg0, cat(p.moving, p.fixed));
  CHECK(testutil::max_abs_diff(phi0, Grid<double>(phi0.shape(), 0.0)) > 0.1);

  // Discriminator update.
  Grid<double> xr = p.fixed;
  for (std::size_t i = 0; i < xr.size(); ++i) xr[i] = 0.25 * p.moving[i] + 0.75 * p.fixed[i];
  const auto xw1 = warp_img(p.moving, phi0, alpha[0]);
  const double L_D = oracle::disc(run(disc0, cat(xr, p.fixed)), run(disc0, cat(xw1, p.fixed)));
  CHECK(log.L_D == doctest::Approx(L_D).epsilon(1e-6));

  // Registration update: updated discriminator, untouched segmenter.
  const auto xw2 = warp_img(p.moving, phi0, alpha[1]);
  const double L_adv = oracle::adv(run(disc1, cat(xw2, p.fixed)));
  const double L_drc = oracle::mse(run(seg0, xw2), run(seg0, p.fixed));
  const double L_cc = oracle::cc(xw2, p.fixed, 5);
  const double L_R = oracle::smoothness(phi0);
  CHECK(std::abs(log.L_adv - L_adv) < 1e-6);
  CHECK(std::abs(log.L_drc - L_drc) < 1e-6);
  CHECK(std::abs(log.L_cc - L_cc) < 1e-6);
  CHECK(std::abs(log.L_R - L_R) < 1e-6);
  CHECK(std::abs(log.L_reg - (0.5 * L_adv + 2.0 * L_drc + 1.5 * L_cc + 0.7 * L_R)) < 1e-6);

  // Segmentation update: updated registration and discriminator.
  const auto phi1 = run(reg1, cat(p.moving, p.fixed));
  const auto xw3 = warp_img(p.moving, phi1, alpha[2]);
  const auto yw3 = warp_lab(p.moving_label, phi1, alpha[2]);
  const auto conf = run(disc1, cat(xw3, p.fixed));
  const double L_ce = oracle::weighted_ce(nullptr, yw3, run(seg0, xw3));
  const double L_acm = oracle::weighted_ce(&conf, yw3, run(seg0, p.fixed));
  CHECK(std::abs(log.L_ce - L_ce) < 1e-6);
  CHECK(std::abs(log.L_acm - L_acm) < 1e-6);
  CHECK(std::abs(log.L_seg - (0.8 * L_acm + 1.2 * L_ce)) < 1e-6);
  CHECK(log.alpha == alpha);
}

TEST_CASE("parameter isolation across the three sub-updates") {
  Trainer<float> t(tiny_config(), 4);
  t.reg.params.at("head.weight") = random_grid<float>(t.reg.params.at("head.weight").shape(), 5, -0.1, 0.1);
  Rng rng(17);
  for (int step = 0; step < 10; ++step) {
    const auto p = toy_pair<float>(100 + static_cast<std::uint64_t>(step));
    const std::vector<const PairData<float>*> batch{&p};
    auto reg0 = t.reg.params, seg0 = t.seg.params, disc0 = t.disc.params;
    t.disc_update(batch, {uniform01(rng)}, true);
    CHECK_FALSE(same_params(t.disc.params, disc0));
    CHECK(same_params(t.reg.params, reg0));
    CHECK(same_params(t.seg.params, seg0));
    disc0 = t.disc.params;
    t.reg_update(batch, {uniform01(rng)}, true);
    CHECK_FALSE(same_params(t.reg.params, reg0));
    CHECK(same_params(t.disc.params, disc0));
    CHECK(same_params(t.seg.params, seg0));
    reg0 = t.reg.params;
    t.seg_update(batch, {uniform01(rng)}, true, true);
    CHECK_FALSE(same_params(t.seg.params, seg0));
    CHECK(same_params(t.reg.params, reg0));
    CHECK(same_params(t.disc.params, disc0));
  }
}

TEST_CASE("region constraint gradients stop at the segmenter") {
  TrainConfig c = tiny_config();
  c.weights.adv = c.weights.cc = c.weights.smooth = 0;
  c.weights.drc = 10;
  Trainer<double> t(c, 4);
  t.reg.params.at("head.weight") = random_grid(t.reg.params.at("head.weight").shape(), 5, -0.1, 0.1);
  const auto p = toy_pair<double>(3);
  const auto seg0 = t.seg.params, reg0 = t.reg.params;
  const auto r = t.reg_update({&p}, {0.7}, true);
  CHECK(r.parts[1] > 0);
  CHECK_FALSE(same_params(t.reg.params, reg0));
  CHECK(same_params(t.seg.params, seg0));
  // The same composition probed for segmenter gradients.
  const auto xm = diff::Var<double>::constant(p.moving), xf = diff::Var<double>::constant(p.fixed);
  const warp::DisplacementField<double> phi(t.reg.forward(diff::concat_channels(xm, xf), true));
  const auto xw = warp::warp_image(xm, warp::scale_field(phi, 0.7));
  const auto loss = loss::drc_loss(t.seg.forward(xw, false), t.seg.forward(xf, false));
  const auto g = t.seg.gradients(loss);
  for (const auto& [k, v] : g)
    for (double x : v.values()) CHECK(x == 0.0);
  const auto greg = t.reg.gradients(loss);
  double norm = 0;
  for (const auto& [k, v] : greg)
    for (double x : v.values()) norm += x * x;
  CHECK(norm > 0);
}

TEST_CASE("logged totals are the weighted sums of their parts") {
  TrainConfig c = tiny_config();
  c.weights = {0.3, 4.0, 2.0, 0.5, 0.25, 1.5};
  Trainer<float> t(c, 4);
  const auto p = toy_pair<float>(9), q = toy_pair<float>(19);
  for (int i = 0; i < 5; ++i) {
    const auto s = t.train_step({&p, &q});
    CHECK(s.L_reg == doctest::Approx(0.3 * s.L_adv + 4.0 * s.L_drc + 2.0 * s.L_cc + 0.5 * s.L_R).epsilon(1e-6));
    CHECK(s.L_seg == doctest::Approx(0.25 * s.L_acm + 1.5 * s.L_ce).epsilon(1e-6));
    for (double a : s.alpha) CHECK((a >= 0 && a <= 1));
  }
}

TEST_CASE("arm toggles shape the step") {
  const auto p = toy_pair<float>(2);
  SUBCASE("pure registration") {
    TrainConfig c = tiny_config();
    c.joint = false;
    c.train_seg = false;
    c.use_drc = false;
    Trainer<float> t(c, 4);
    const auto seg0 = t.seg.params;
    const auto s = t.train_step({&p});
    CHECK(s.L_D > 0);
    CHECK(s.L_seg == 0);
    CHECK(s.L_drc == 0);
    CHECK(same_params(t.seg.params, seg0));
  }
  SUBCASE("seg-only with a registration warm-up") {
    TrainConfig c = tiny_config();
    c.joint = false;
    c.train_reg = false;
    c.use_dss = c.use_acm = c.use_drc = false;
    c.seg_only_reg_warmup = 2;
    Trainer<float> t(c, 4);
    const auto seg0 = t.seg.params;
    for (int i = 0; i < 2; ++i) {
      const auto s = t.train_step({&p});
      CHECK(s.L_D > 0);
      CHECK(s.L_seg == 0);
    }
    CHECK(same_params(t.seg.params, seg0));
    const auto reg_after = t.reg.params;
    const auto s = t.train_step({&p});
    CHECK(s.L_D == 0);
    CHECK(s.L_ce > 0);
    CHECK(s.L_acm == 0);
    CHECK(s.alpha[2] > 0);
    CHECK(s.alpha[2] < 1);
    CHECK(same_params(t.reg.params, reg_after));
  }
  SUBCASE("seg-only on raw images") {
    TrainConfig c = tiny_config();
    c.joint = false;
    c.train_reg = false;
    c.seg_only_reg_warmup = 0;
    Trainer<float> t(c, 4);
    const auto reg0 = t.reg.params, disc0 = t.disc.params;
    const auto s = t.train_step({&p});
    CHECK(s.L_D == 0);
    CHECK(s.alpha == std::array<double, 3>{0, 0, 0});
    CHECK(same_params(t.reg.params, reg0));
    CHECK(same_params(t.disc.params, disc0));
  }
  SUBCASE("DSS off draws alpha = 1") {
    TrainConfig c = tiny_config();
    c.use_dss = false;
    Trainer<float> t(c, 4);
    CHECK(t.train_step({&p}).alpha == std::array<double, 3>{1, 1, 1});
  }
}

TEST_CASE("non-finite losses abort with the component named") {
  Trainer<float> t(tiny_config(), 4);
  auto p = toy_pair<float>(4);
  p.fixed[5] = std::nanf("");
  CHECK_THROWS_WITH_AS(t.train_step({&p}), doctest::Contains("displacement field"), TrainingError);
  CHECK_THROWS_WITH_AS(t.train_step({&p}), doctest::Contains("rng state"), TrainingError);
  // A finite field with a poisoned discriminator reaches the loss checks.
  Trainer<float> u(tiny_config(), 4);
  u.disc.params.at("head.bias")[0] = std::nanf("");
  const auto q = toy_pair<float>(4);
  CHECK_THROWS_WITH_AS(u.train_step({&q}), doctest::Contains("non-finite L_D at step 1"), TrainingError);
}

TEST_CASE("checkpoints") {
  const fs::path dir = scratch("ckpt");
  fs::create_directories(dir);
  Trainer<float> t(tiny_config(), 4);
  SUBCASE("fresh registration head is stored as zeros") {
    save_checkpoint(t, "c", dir / "fresh.ckpt");
    std::map<std::string, Grid<float>> tensors;
    read_checkpoint(dir / "fresh.ckpt", tensors);
    for (float v : tensors.at("reg/head.weight").values()) CHECK(v == 0.f);
    for (float v : tensors.at("reg/head.bias").values()) CHECK(v == 0.f);
  }
  const auto p = toy_pair<float>(8);
  for (int i = 0; i < 3; ++i) t.train_step({&p});
  save_checkpoint(t, "c", dir / "a.ckpt");
  SUBCASE("round trip is bit exact") {
    Trainer<float> u(tiny_config(), 4);
    const auto info = load_checkpoint(u, "c", dir / "a.ckpt");
    CHECK(info.step == 3);
    CHECK(u.step() == 3);
    CHECK(same_params(u.reg.params, t.reg.params));
    CHECK(same_params(u.seg.params, t.seg.params));
    CHECK(same_params(u.disc.params, t.disc.params));
    CHECK(same_params(u.seg_state.first_moment, t.seg_state.first_moment));
    CHECK(same_params(u.reg_state.second_moment, t.reg_state.second_moment));
    CHECK(u.seg_state.step == t.seg_state.step);
    CHECK(u.rng_state() == t.rng_state());
    save_checkpoint(u, "c", dir / "b.ckpt");
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    // Both continue identically.
    const auto sa = t.train_step({&p}), sb = u.train_step({&p});
    CHECK(step_log_row(sa) == step_log_row(sb));
  }
  SUBCASE("edited config is refused unless allowed") {
    TrainConfig edited = tiny_config();
    edited.weights.drc = 3;
    Trainer<float> u(edited, 4);
    CHECK_THROWS_AS(load_checkpoint(u, "c", dir / "a.ckpt"), CheckpointMismatch);
    CHECK_THROWS_AS(load_checkpoint(u, "other-corpus", dir / "a.ckpt"), CheckpointMismatch);
    CHECK_NOTHROW(load_checkpoint(u, "c", dir / "a.ckpt", true));
    CHECK(same_params(u.reg.params, t.reg.params));
  }
  SUBCASE("corruption is reported") {
    std::string bytes = slurp(dir / "a.ckpt");
    std::ofstream(dir / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    Trainer<float> u(tiny_config(), 4);
    CHECK_THROWS_AS(load_checkpoint(u, "c", dir / "trunc.ckpt"), data::FormatError);
    bytes[0] = 'X';
    std::ofstream(dir / "magic.ckpt", std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint(u, "c", dir / "magic.ckpt"), data::FormatError);
    CHECK_THROWS(load_checkpoint(u, "c", dir / "missing.ckpt"));
  }
  fs::remove_all(dir);
}

TEST_CASE("runs are deterministic and resumable") {
  TrainConfig c = tiny_config();
  c.arch.levels = 3;
  c.steps = 12;
  c.checkpoint_every = 6;
  const fs::path a = scratch("run_a"), b = scratch("run_b"), r = scratch("run_r");
  const auto ra = run_training(c, corpus(), {a, {}, false, {}});
  run_training(c, corpus(), {b, {}, false, {}});
  CHECK(ra.logs.size() == 12);
  CHECK(slurp(a / "steps.csv") == slurp(b / "steps.csv"));
  CHECK(slurp(a / "final.ckpt") == slurp(b / "final.ckpt"));
  CHECK(fs::exists(a / "ckpt_000006.ckpt"));
  CHECK(fs::exists(a / "config.json"));
  CHECK(read_step_log(a / "steps.csv").size() == 12);

  run_training(c, corpus(), {r, a / "ckpt_000006.ckpt", false, {}});
  const auto full = read_step_log(a / "steps.csv"), resumed = read_step_log(r / "steps.csv");
  REQUIRE(resumed.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(step_log_row(resumed[i]) == step_log_row(full[i + 6]));
  CHECK(slurp(a / "final.ckpt") == slurp(r / "final.ckpt"));

  TrainConfig other = c;
  other.master_seed = 4;
  const auto ro = run_training(other, corpus(), {b, {}, false, {}});
  CHECK(step_log_row(ro.logs[0]) != step_log_row(ra.logs[0]));
  for (const auto& d : {a, b, r}) fs::remove_all(d);
}
