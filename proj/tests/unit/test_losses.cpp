#include <doctest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "oracles.hpp"
#include "regseg/gradcheck.hpp"
#include "regseg/gradsuite.hpp"
#include "regseg/losses.hpp"
#include "regseg/ops.hpp"

using namespace regseg;
using namespace regseg::loss;
using testutil::random_grid;
using testutil::random_onehot;
using testutil::random_simplex;
using V = diff::Var<double>;

namespace {

V c(const Grid<double>& g) { return V::constant(g); }
V scalar(double v) { return V::constant(Grid<double>(Shape{1}, v)); }

warp::DisplacementField<double> field_of(const Grid<double>& g) { return warp::DisplacementField<double>(c(g)); }

}  // namespace

TEST_CASE("local_cc") {
  const auto a = random_grid(Shape{1, 16, 16}, 1, 0, 1);
  SUBCASE("self correlation is -1") { CHECK(std::abs(local_cc(c(a), c(a)).item() + 1.0) < 1e-3); }
  SUBCASE("negation is -1") {
    Grid<double> neg = a;
    for (auto& v : neg.values()) v = -v;
    CHECK(std::abs(local_cc(c(a), c(neg)).item() + 1.0) < 1e-3);
  }
  SUBCASE("independent white noise stays in (-0.35, 0)") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const double v = local_cc(c(random_grid(Shape{1, 32, 32}, 2 * s)), c(random_grid(Shape{1, 32, 32}, 2 * s + 1))).item();
      CHECK(v > -0.35);
      CHECK(v < 0.0);
    }
  }
  SUBCASE("matches the direct window oracle") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto x = random_grid(Shape{1, 12, 10}, s), y = random_grid(Shape{1, 12, 10}, s + 7);
      for (int w : {3, 5, 9}) CHECK(std::abs(local_cc(c(x), c(y), w).item() - oracle::cc(x, y, w)) < 1e-10);
    }
  }
  SUBCASE("affine intensity invariance") {
    const auto b = random_grid(Shape{1, 16, 16}, 9, 0, 1);
    const double base = local_cc(c(a), c(b)).item();
    for (auto [k, d] : {std::pair{2.5, 0.3}, {-0.7, 1.0}, {4.0, -2.0}}) {
      Grid<double> t = b;
      for (auto& v : t.values()) v = k * v + d;
      CHECK(std::abs(local_cc(c(a), c(t)).item() - base) < 1e-3);
      CHECK(std::abs(local_cc(c(t), c(a)).item() - base) < 1e-3);
    }
  }
  SUBCASE("even window and multi-channel inputs rejected") {
    CHECK_THROWS_AS(local_cc(c(a), c(a), 4), std::invalid_argument);
    const auto two = random_grid(Shape{2, 4, 4}, 3);
    CHECK_THROWS_AS(local_cc(c(two), c(two)), ShapeError);
  }
}

TEST_CASE("smoothness") {
  CHECK(smoothness(field_of(Grid<double>(Shape{2, 6, 5}, 3.5))).item() == 0.0);
  Grid<double> ramp(Shape{2, 4, 5}, 0.0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) ramp.at(0, i, j) = i;
  // 3*5 unit row differences out of 2*(3*5 + 4*4) terms.
  CHECK(smoothness(field_of(ramp)).item() == doctest::Approx(15.0 / 62.0).epsilon(1e-14));
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto f = random_grid(Shape{2, 9, 7}, s, -3, 3);
    CHECK(std::abs(smoothness(field_of(f)).item() - oracle::smoothness(f)) < 1e-10);
  }
}

TEST_CASE("fuse_reference") {
  const auto m = random_grid(Shape{1, 4, 4}, 1), f = random_grid(Shape{1, 4, 4}, 2);
  CHECK(fuse_reference(c(m), c(f), 0.0).value() == f);
  CHECK(fuse_reference(c(m), c(f), 1.0).value() == m);
  const auto r = fuse_reference(c(Grid<double>(Shape{1, 2, 2}, 1.0)), c(Grid<double>(Shape{1, 2, 2}, 0.0)), 0.3);
  for (double v : r.value().values()) CHECK(v == doctest::Approx(0.3).epsilon(1e-15));
  CHECK_THROWS_AS(fuse_reference(c(m), c(f), 1.5), std::invalid_argument);
  CHECK_THROWS_AS(fuse_reference(c(m), c(f), -0.1), std::invalid_argument);
}

TEST_CASE("disc_loss and adv_loss") {
  const Shape s{1, 4, 4};
  const double e = kLogEps;
  CHECK(std::abs(disc_loss(c(Grid<double>(s, 1 - e)), c(Grid<double>(s, e))).item()) < 1e-6);
  CHECK(disc_loss(c(Grid<double>(s, 0.5)), c(Grid<double>(s, 0.5))).item() ==
        doctest::Approx(2 * std::log(2.0)).epsilon(1e-6));
  for (std::uint64_t k = 0; k < 5; ++k) {
    const auto r = random_grid(s, k, 0.01, 0.99), w = random_grid(s, k + 10, 0.01, 0.99);
    double o = 0;
    for (std::size_t i = 0; i < r.size(); ++i) o += -std::log(r[i] + e) - std::log(1 - w[i] + e);
    CHECK(std::abs(disc_loss(c(r), c(w)).item() - o / 16) < 1e-10);
  }
  CHECK(std::abs(adv_loss(c(Grid<double>(s, 1 - e))).item()) < 1e-6);
  CHECK(adv_loss(c(Grid<double>(s, 0.5))).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(adv_loss(c(Grid<double>(s, e))).item() == doctest::Approx(-std::log(2 * e)).epsilon(1e-9));
  CHECK(adv_loss(c(Grid<double>(s, 0.0))).item() == doctest::Approx(16.1).epsilon(0.01));
}

TEST_CASE("ce_loss") {
  const auto t = random_onehot(4, 5, 5, 3);
  CHECK(std::abs(ce_loss(c(t), c(t)).item()) < 1e-6);
  CHECK(ce_loss(c(Grid<double>(Shape{4, 5, 5}, 0.25)), c(t)).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  for (std::uint64_t k = 0; k < 5; ++k) {
    const auto p = random_simplex(3, 4, 6, k), q = random_simplex(3, 4, 6, k + 20);
    double o = 0;
    for (std::size_t px = 0; px < 24; ++px)
      for (int ch = 0; ch < 3; ++ch) o -= q[ch * 24 + px] * std::log(p[ch * 24 + px] + kLogEps);
    CHECK(std::abs(ce_loss(c(p), c(q)).item() - o / 24) < 1e-10);
  }
  Grid<double> bad = t;
  bad[0] = 0.5;
  CHECK_THROWS_AS(ce_loss(c(bad), c(t)), std::invalid_argument);
  CHECK_THROWS_AS(ce_loss(c(t), c(bad)), std::invalid_argument);
}

TEST_CASE("acm_loss") {
  const auto lab = random_simplex(4, 6, 6, 1), pred = random_simplex(4, 6, 6, 2);
  const Shape ms{1, 6, 6};
  CHECK(acm_loss(c(Grid<double>(ms, 0.0)), c(lab), c(pred)).item() == 0.0);
  CHECK(acm_loss(c(Grid<double>(ms, 1.0)), c(lab), c(pred)).item() == ce_loss(c(pred), c(lab)).item());
  const double toy = acm_loss(c(Grid<double>(Shape{1, 1, 1}, 0.5)), c(Grid<double>(Shape{2, 1, 1}, {1, 0})),
                              c(Grid<double>(Shape{2, 1, 1}, {0.25, 0.75})))
                         .item();
  CHECK(toy == doctest::Approx(0.5 * -std::log(0.25)).epsilon(1e-6));
  SUBCASE("monotone in the confidence map") {
    for (std::uint64_t k = 0; k < 20; ++k) {
      Grid<double> d = random_grid(ms, k, 0.01, 0.9);
      const double before = acm_loss(c(d), c(lab), c(pred)).item();
      for (std::size_t i = k % 7; i < d.size(); i += 3) d[i] += 0.05;
      CHECK(acm_loss(c(d), c(lab), c(pred)).item() >= before);
    }
  }
  SUBCASE("no gradient reaches the confidence map") {
    const V d = V::leaf(random_grid(ms, 5, 0.1, 0.9), "d");
    const V p = V::leaf(pred, "p");
    const auto g = diff::backward(acm_loss(d, c(lab), p));
    CHECK(g.count("d") == 0);
    CHECK(g.count("p") == 1);
  }
  CHECK_THROWS_AS(acm_loss(c(Grid<double>(Shape{1, 5, 6}, 1.0)), c(lab), c(pred)), ShapeError);
}

TEST_CASE("drc_loss") {
  const auto a = random_simplex(4, 5, 5, 1), b = random_simplex(4, 5, 5, 2);
  CHECK(drc_loss(c(a), c(a)).item() == 0.0);
  CHECK(drc_loss(c(a), c(b)).item() == drc_loss(c(b), c(a)).item());
  Grid<double> z(Shape{4, 5, 5}, 0.0), one = z;
  one[17] = 1.0;
  CHECK(drc_loss(c(one), c(z)).item() == doctest::Approx(1.0 / 100));
  double o = 0;
  for (std::size_t i = 0; i < a.size(); ++i) o += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(std::abs(drc_loss(c(a), c(b)).item() - o / 100) < 1e-10);
  CHECK_THROWS_AS(drc_loss(c(a), c(random_simplex(3, 5, 5, 3))), ShapeError);
}

TEST_CASE("weighted totals") {
  LossWeights w;
  CHECK(w.adv == 1.0);
  CHECK(w.drc == 10.0);
  CHECK(w.cc == 1.0);
  CHECK(w.smooth == 1.0);
  CHECK(w.acm == 1.0);
  CHECK(w.ce == 1.0);
  RegParts<double> zero{scalar(0), scalar(0), scalar(0), scalar(0)};
  CHECK(reg_total(zero, w).item() == 0.0);
  RegParts<double> p{scalar(0.7), scalar(0.01), scalar(-0.8), scalar(0.02)};
  CHECK(reg_total(p, w).item() == doctest::Approx(0.02).epsilon(1e-12));
  LossWeights no_drc = w;
  no_drc.drc = 0;
  CHECK(reg_total(p, no_drc).item() == doctest::Approx(0.7 - 0.8 + 0.02).epsilon(1e-12));
  SegParts<double> s{scalar(0.3), scalar(0.5)};
  CHECK(seg_total(s, w).item() == doctest::Approx(0.8));
  LossWeights no_acm = w;
  no_acm.acm = 0;
  CHECK(seg_total(s, no_acm).item() == 0.5);
  LossWeights none = no_acm;
  none.ce = 0;
  CHECK(seg_total(s, none).item() == 0.0);

  SUBCASE("linear in each weight") {
    const double base = reg_total(p, w).item();
    LossWeights w2 = w;
    w2.adv *= 2;
    CHECK(reg_total(p, w2).item() - base == doctest::Approx(0.7).epsilon(1e-12));
    w2 = w;
    w2.ce *= 2;
    CHECK(seg_total(s, w2).item() - seg_total(s, w).item() == doctest::Approx(0.5).epsilon(1e-12));
  }
  LossWeights bad;
  bad.cc = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.cc = std::nan("");
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("every loss passes the finite-difference check on 16x16 instances") {
  const int N = 16;
  const diff::GradCheckOptions opt{1e-6, 1e-4, 48, 3};
  auto logits = [&](std::uint64_t s) { return random_grid(Shape{4, N, N}, s, -2, 2); };
  const auto lab = random_simplex(4, N, N, 77);

  SUBCASE("cc") {
    diff::ParamSet<double> p{{"a", random_grid(Shape{1, N, N}, 1, 0, 1)}};
    const auto b = c(random_grid(Shape{1, N, N}, 2, 0, 1));
    CHECK(diff::grad_check([&](const auto& v) { return local_cc(v.at("a"), b); }, p, opt).max_rel_error() < 1e-4);
  }
  SUBCASE("smoothness") {
    diff::ParamSet<double> p{{"f", random_grid(Shape{2, N, N}, 3)}};
    CHECK(diff::grad_check([&](const auto& v) { return smoothness(warp::DisplacementField<double>(v.at("f"))); }, p,
                           opt)
              .max_rel_error() < 1e-4);
  }
  SUBCASE("ce") {
    diff::ParamSet<double> p{{"z", logits(4)}};
    CHECK(diff::grad_check([&](const auto& v) { return ce_loss(diff::softmax_channel(v.at("z")), c(lab)); }, p, opt)
              .max_rel_error() < 1e-4);
  }
  SUBCASE("acm") {
    diff::ParamSet<double> p{{"z", logits(5)}};
    const auto d = c(random_grid(Shape{1, N, N}, 6, 0.05, 0.95));
    CHECK(diff::grad_check([&](const auto& v) { return acm_loss(d, c(lab), diff::softmax_channel(v.at("z"))); }, p, opt)
              .max_rel_error() < 1e-4);
  }
  SUBCASE("drc") {
    diff::ParamSet<double> p{{"z", logits(7)}};
    const auto fixed = c(random_simplex(4, N, N, 8));
    CHECK(diff::grad_check([&](const auto& v) { return drc_loss(diff::softmax_channel(v.at("z")), fixed); }, p, opt)
              .max_rel_error() < 1e-4);
  }
  SUBCASE("disc") {
    diff::ParamSet<double> p{{"r", random_grid(Shape{1, N, N}, 9, -2, 2)}, {"w", random_grid(Shape{1, N, N}, 10, -2, 2)}};
    CHECK(diff::grad_check([&](const auto& v) { return disc_loss(diff::sigmoid(v.at("r")), diff::sigmoid(v.at("w"))); },
                           p, opt)
              .max_rel_error() < 1e-4);
  }
  SUBCASE("adv") {
    diff::ParamSet<double> p{{"w", random_grid(Shape{1, N, N}, 11, -2, 2)}};
    CHECK(diff::grad_check([&](const auto& v) { return adv_loss(diff::sigmoid(v.at("w"))); }, p, opt).max_rel_error() <
          1e-4);
  }
}

TEST_CASE("gradient suite covers every loss") {
  const auto entries = gradient_suite(16, 1e-5);
  std::set<std::string> names;
  for (const auto& e : entries) {
    CAPTURE(e.name);
    names.insert(e.name);
    CHECK(e.probed > 0);
    CHECK(e.max_rel_error < 1e-4);
  }
  CHECK(names == std::set<std::string>{"cc", "smoothness", "ce", "acm", "drc", "disc", "adv", "warp_field",
                                       "reg_total", "seg_total"});
}
