#include <chrono>
#include <cmath>
#include <sstream>

#include "regseg/ops.hpp"
#include "regseg/trainer.hpp"
#include "regseg/warp.hpp"

namespace regseg::train {

using diff::Var;

namespace {

template <typename T>
Var<T> cst(const Grid<T>& g) {
  return Var<T>::constant(g);
}

template <typename T>
Var<T> pair_input(const Var<T>& a, const Var<T>& b) {
  return diff::concat_channels(a, b);
}

double grid_mean(const Grid<float>& g) {
  double s = 0;
  for (float v : g.values()) s += v;
  return s / static_cast<double>(g.size());
}

double grid_mean(const Grid<double>& g) {
  double s = 0;
  for (double v : g.values()) s += v;
  return s / static_cast<double>(g.size());
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg, int num_classes) : cfg_(std::move(cfg)) {
  cfg_.arch.num_classes = num_classes;
  cfg_.validate();
  reg = nets::build_reg_net<T>(cfg_.arch, derive_seed(cfg_.master_seed, 1));
  seg = nets::build_seg_net<T>(cfg_.arch, derive_seed(cfg_.master_seed, 2));
  disc = nets::build_disc_net<T>(cfg_.arch, derive_seed(cfg_.master_seed, 3));
  reg_state = diff::OptimizerState<T>::init(cfg_.reg_opt, reg.params);
  seg_state = diff::OptimizerState<T>::init(cfg_.seg_opt, seg.params);
  disc_state = diff::OptimizerState<T>::init(cfg_.disc_opt, disc.params);
  rng.seed(derive_seed(cfg_.master_seed, 4));
}

template <typename T>
double Trainer<T>::draw_alpha() {
  return cfg_.use_dss ? uniform01(rng) : 1.0;
}

template <typename T>
std::string Trainer<T>::rng_state() const {
  std::ostringstream os;
  os << rng;
  return os.str();
}

template <typename T>
void Trainer<T>::set_rng_state(const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw std::runtime_error("malformed RNG state");
}

namespace {

template <typename T>
void check_finite(double v, const char* component, int step, const std::string& rng_state) {
  if (!std::isfinite(v))
    throw TrainingError(std::string("non-finite ") + component + " at step " + std::to_string(step) +
                        "; rng state: " + rng_state);
}

template <typename T>
void apply_update(diff::OptimizerState<T>& st, diff::ParamSet<T>& params, const diff::Gradients<T>& g,
                  const char* net, int step) {
  try {
    diff::optimizer_step(st, params, g);
  } catch (const diff::NonFiniteGradient& e) {
    throw TrainingError(std::string(net) + " update at step " + std::to_string(step) + ": " + e.what());
  }
}

template <typename T>
warp::DisplacementField<T> checked_field(const Var<T>& phi, int step, const std::string& rng_state) {
  for (T v : phi.value().values())
    if (!std::isfinite(v))
      throw TrainingError("non-finite displacement field at step " + std::to_string(step) + "; rng state: " + rng_state);
  return warp::DisplacementField<T>(phi);
}

// Field predicted by a frozen registration net, as a constant.
template <typename T>
warp::DisplacementField<T> frozen_field(const nets::NetworkHandle<T>& reg, const PairData<T>& p, int step,
                                        const std::string& rng_state) {
  const Var<T> phi = reg.forward(pair_input(cst(p.moving), cst(p.fixed)), false);
  return checked_field(cst(phi.value()), step, rng_state);
}

}  // namespace

template <typename T>
UpdateResult<T> Trainer<T>::disc_update(const std::vector<const PairData<T>*>& batch,
                                        const std::vector<double>& alphas, bool apply) {
  const T inv_b = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  Var<T> total;
  double conf = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PairData<T>& p = *batch[b];
    const auto field = warp::scale_field(frozen_field(reg, p, step_ + 1, rng_state()), alphas[b]);
    const Var<T> xm = cst(p.moving), xf = cst(p.fixed);
    const Var<T> xw = cst(warp::warp_image(xm, field).value());
    const Var<T> xr = loss::fuse_reference(xm, xf, cfg_.beta);
    const Var<T> d_ref = disc.forward(pair_input(xr, xf), true);
    const Var<T> d_warp = disc.forward(pair_input(xw, xf), true);
    conf += grid_mean(d_warp.value()) / static_cast<double>(batch.size());
    const Var<T> l = diff::scale(loss::disc_loss(d_ref, d_warp), inv_b);
    total = total ? diff::add(total, l) : l;
  }
  UpdateResult<T> r;
  r.loss = total.item();
  r.confidence = conf;
  check_finite<T>(r.loss, "L_D", step_ + 1, rng_state());
  r.grads = disc.gradients(total);
  if (apply) apply_update(disc_state, disc.params, r.grads, "disc", step_ + 1);
  return r;
}

template <typename T>
UpdateResult<T> Trainer<T>::reg_update(const std::vector<const PairData<T>*>& batch,
                                       const std::vector<double>& alphas, bool apply) {
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Var<T> total;
  std::array<double, 4> parts{};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PairData<T>& p = *batch[b];
    const Var<T> xm = cst(p.moving), xf = cst(p.fixed);
    const auto field = checked_field(reg.forward(pair_input(xm, xf), true), step_ + 1, rng_state());
    const auto perturbed = warp::scale_field(field, alphas[b]);
    const Var<T> xw = warp::warp_image(xm, perturbed);
    loss::RegParts<T> rp;
    rp.adv = loss::adv_loss(disc.forward(pair_input(xw, xf), false));
    rp.drc = cfg_.use_drc ? loss::drc_loss(seg.forward(xw, false), seg.forward(xf, false)) : loss::zero_scalar<T>();
    rp.cc = loss::local_cc(xw, xf, cfg_.cc_window);
    rp.smooth = loss::smoothness(field);
    const Var<T> l = diff::scale(loss::reg_total(rp, cfg_.weights), static_cast<T>(inv_b));
    parts[0] += rp.adv.item() * inv_b;
    parts[1] += rp.drc.item() * inv_b;
    parts[2] += rp.cc.item() * inv_b;
    parts[3] += rp.smooth.item() * inv_b;
    total = total ? diff::add(total, l) : l;
  }
  UpdateResult<T> r;
  r.loss = total.item();
  r.parts = parts;
  const char* names[] = {"L_adv", "L_drc", "L_cc", "L_R"};
  for (int i = 0; i < 4; ++i) check_finite<T>(parts[static_cast<std::size_t>(i)], names[i], step_ + 1, rng_state());
  check_finite<T>(r.loss, "L_reg", step_ + 1, rng_state());
  r.grads = reg.gradients(total);
  if (apply) apply_update(reg_state, reg.params, r.grads, "reg", step_ + 1);
  return r;
}

template <typename T>
UpdateResult<T> Trainer<T>::seg_update(const std::vector<const PairData<T>*>& batch,
                                       const std::vector<double>& alphas, bool apply, bool warped) {
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const bool acm = cfg_.use_acm && cfg_.joint;
  Var<T> total;
  std::array<double, 4> parts{};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PairData<T>& p = *batch[b];
    Var<T> xw = cst(p.moving), yw = cst(p.moving_label);
    const Var<T> xf = cst(p.fixed);
    if (warped) {
      const auto field = warp::scale_field(frozen_field(reg, p, step_ + 1, rng_state()), alphas[b]);
      xw = cst(warp::warp_image(xw, field).value());
      yw = cst(warp::warp_label(yw, field).value());
    }
    loss::SegParts<T> sp;
    sp.ce = loss::ce_loss(seg.forward(xw, true), yw);
    if (acm) {
      const Var<T> d = disc.forward(pair_input(xw, xf), false);
      sp.acm = loss::acm_loss(d, yw, seg.forward(xf, true));
    } else {
      sp.acm = loss::zero_scalar<T>();
    }
    const Var<T> l = diff::scale(loss::seg_total(sp, cfg_.weights), static_cast<T>(inv_b));
    parts[0] += sp.acm.item() * inv_b;
    parts[1] += sp.ce.item() * inv_b;
    total = total ? diff::add(total, l) : l;
  }
  UpdateResult<T> r;
  r.loss = total.item();
  r.parts = parts;
  check_finite<T>(parts[0], "L_acm", step_ + 1, rng_state());
  check_finite<T>(parts[1], "L_ce", step_ + 1, rng_state());
  check_finite<T>(r.loss, "L_seg", step_ + 1, rng_state());
  r.grads = seg.gradients(total);
  if (apply) apply_update(seg_state, seg.params, r.grads, "seg", step_ + 1);
  return r;
}

template <typename T>
StepLog Trainer<T>::train_step(const std::vector<const PairData<T>*>& batch,
                               const std::optional<std::array<double, 3>>& alpha_override) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const auto t0 = std::chrono::steady_clock::now();
  StepLog log;
  log.alpha = {0.0, 0.0, 0.0};

  const int k = step_ + 1;
  const bool seg_only = !cfg_.joint && cfg_.train_seg;
  const bool warmup_phase = seg_only && k <= cfg_.seg_only_reg_warmup;
  const bool run_reg = cfg_.trains_reg() || warmup_phase;
  const bool run_seg = cfg_.trains_seg() && !warmup_phase;
  const bool seg_warped = cfg_.joint || (seg_only && cfg_.seg_only_reg_warmup > 0);

  // The seg-only arm augments with random alpha along the warm-up fields
  // even though DSS is off for it.
  const bool random_seg_alpha = seg_only && seg_warped;
  // Numeric failures inside an update (e.g. a NaN reaching log) are
  // reported like the explicit loss checks.
  auto guarded = [&](const char* component, auto&& fn) {
    const std::string state = rng_state();
    try {
      return fn();
    } catch (const TrainingError&) {
      throw;
    } catch (const std::domain_error& e) {
      throw TrainingError(std::string("non-finite ") + component + " at step " + std::to_string(k) + " (" +
                          e.what() + "); rng state: " + state);
    }
  };
  auto draws = [&](int slot) {
    std::vector<double> a(batch.size());
    for (double& v : a)
      v = alpha_override                      ? (*alpha_override)[static_cast<std::size_t>(slot)]
          : (slot == 2 && random_seg_alpha) ? uniform01(rng)
                                            : draw_alpha();
    double m = 0;
    for (double v : a) m += v;
    log.alpha[static_cast<std::size_t>(slot)] = m / static_cast<double>(a.size());
    return a;
  };

  if (run_reg) {
    const auto r1 = guarded("L_D", [&] { return disc_update(batch, draws(0), true); });
    log.L_D = r1.loss;
    log.confidence = r1.confidence;
    const auto r2 = guarded("L_reg", [&] { return reg_update(batch, draws(1), true); });
    log.L_adv = r2.parts[0];
    log.L_drc = r2.parts[1];
    log.L_cc = r2.parts[2];
    log.L_R = r2.parts[3];
    log.L_reg = r2.loss;
  }
  if (run_seg) {
    const std::vector<double> a3 = seg_warped ? draws(2) : std::vector<double>(batch.size(), 0.0);
    const auto r3 = guarded("L_seg", [&] { return seg_update(batch, a3, true, seg_warped); });
    log.L_acm = r3.parts[0];
    log.L_ce = r3.parts[1];
    log.L_seg = r3.loss;
  }
  step_ = k;
  log.step = k;
  if (cfg_.log_timing)
    log.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

template class Trainer<float>;
template class Trainer<double>;

}  // namespace regseg::train
