#include "regseg/gradsuite.hpp"

#include "regseg/losses.hpp"
#include "regseg/ops.hpp"
#include "regseg/rng.hpp"

namespace regseg::loss {

namespace {

using V = diff::Var<double>;
using Leaves = std::map<std::string, V>;

Grid<double> uniform_grid(const Shape& s, Rng& rng, double lo, double hi) {
  Grid<double> g(s);
  for (auto& v : g.values()) v = uniform(rng, lo, hi);
  return g;
}

// Integer part in [-2, 2], fractional part in [0.2, 0.8].
Grid<double> offgrid_field(int n, Rng& rng) {
  Grid<double> g(Shape{2, n, n});
  for (auto& v : g.values()) v = std::floor(uniform(rng, -2, 3)) + uniform(rng, 0.2, 0.8);
  return g;
}

Grid<double> simplex(int C, int n, Rng& rng) {
  Grid<double> g = uniform_grid(Shape{C, n, n}, rng, 0.05, 1.0);
  const std::size_t P = g.plane();
  for (std::size_t p = 0; p < P; ++p) {
    double s = 0;
    for (int c = 0; c < C; ++c) s += g[c * P + p];
    for (int c = 0; c < C; ++c) g[c * P + p] /= s;
  }
  return g;
}

}  // namespace

std::vector<GradSuiteEntry> gradient_suite(int n, double eps, std::uint64_t seed) {
  Rng rng(seed);
  const int C = 4;
  const auto xm = V::constant(uniform_grid(Shape{1, n, n}, rng, 0, 1));
  const auto xf = V::constant(uniform_grid(Shape{1, n, n}, rng, 0, 1));
  const auto label = V::constant(simplex(C, n, rng));
  const auto conf = V::constant(uniform_grid(Shape{1, n, n}, rng, 0.05, 0.95));
  const LossWeights w{0.7, 10.0, 1.3, 0.9, 1.1, 0.8};
  diff::GradCheckOptions opt;
  opt.eps = eps;

  auto field = [](const Leaves& v) { return warp::DisplacementField<double>(v.at("phi")); };
  auto seg = [](const V& z) { return diff::softmax_channel(z); };

  struct Case {
    const char* name;
    diff::ParamSet<double> params;
    diff::LossBuilder build;
  };
  std::vector<Case> cases;
  auto logits = [&](int c) { return uniform_grid(Shape{c, n, n}, rng, -2, 2); };

  cases.push_back({"cc", {{"a", uniform_grid(Shape{1, n, n}, rng, 0, 1)}},
                   [&](const Leaves& v) { return local_cc(v.at("a"), xf); }});
  cases.push_back({"smoothness", {{"phi", offgrid_field(n, rng)}},
                   [&](const Leaves& v) { return smoothness(field(v)); }});
  cases.push_back({"ce", {{"z", logits(C)}}, [&](const Leaves& v) { return ce_loss(seg(v.at("z")), label); }});
  cases.push_back({"acm", {{"z", logits(C)}}, [&](const Leaves& v) { return acm_loss(conf, label, seg(v.at("z"))); }});
  cases.push_back({"drc", {{"a", logits(C)}, {"b", logits(C)}},
                   [&](const Leaves& v) { return drc_loss(seg(v.at("a")), seg(v.at("b"))); }});
  cases.push_back({"disc", {{"r", logits(1)}, {"w", logits(1)}},
                   [&](const Leaves& v) { return disc_loss(diff::sigmoid(v.at("r")), diff::sigmoid(v.at("w"))); }});
  cases.push_back({"adv", {{"w", logits(1)}}, [&](const Leaves& v) { return adv_loss(diff::sigmoid(v.at("w"))); }});
  cases.push_back({"warp_field", {{"phi", offgrid_field(n, rng)}},
                   [&](const Leaves& v) {
                     const auto xw = warp::warp_image(xm, field(v));
                     return diff::mean(diff::mul(xw, xf));
                   }});
  // Registration total: every term sees the warped image through the field.
  cases.push_back({"reg_total", {{"phi", offgrid_field(n, rng)}, {"d", logits(1)}, {"s", logits(C)}},
                   [&](const Leaves& v) {
                     const auto phi = field(v);
                     const auto xw = warp::warp_image(xm, phi);
                     RegParts<double> p;
                     p.adv = adv_loss(diff::sigmoid(diff::add(v.at("d"), diff::scale(xw, 2.0))));
                     p.drc = drc_loss(seg(diff::add(v.at("s"), diff::broadcast_channels(xw, C))), seg(v.at("s")));
                     p.cc = local_cc(xw, xf);
                     p.smooth = smoothness(phi);
                     return reg_total(p, w);
                   }});
  cases.push_back({"seg_total", {{"z", logits(C)}, {"y", logits(C)}},
                   [&](const Leaves& v) {
                     SegParts<double> p;
                     p.acm = acm_loss(conf, label, seg(v.at("z")));
                     p.ce = ce_loss(seg(v.at("y")), label);
                     return seg_total(p, w);
                   }});

  std::vector<GradSuiteEntry> out;
  for (auto& c : cases) {
    const auto report = diff::grad_check(c.build, c.params, opt);
    std::size_t probed = 0;
    for (const auto& [_, e] : report.per_param) probed += e.probed;
    out.push_back({c.name, report.max_rel_error(), probed});
  }
  return out;
}

}  // namespace regseg::loss
