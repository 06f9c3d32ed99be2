#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "regseg/evalkit.hpp"
#include "regseg/warp.hpp"

using namespace regseg;
using namespace regseg::eval;
namespace fs = std::filesystem;

namespace {

Grid<float> mask(int H, int W, std::initializer_list<std::pair<int, int>> on) {
  Grid<float> m(Shape{1, H, W}, 0.f);
  for (auto [i, j] : on) m.at(0, i, j) = 1.f;
  return m;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("regseg_test_eval_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Label with a filled square of class 1 and a bar of class 2.
data::Sample square_sample(int shift) {
  const int H = 16, W = 16;
  Grid<float> lab(Shape{3, H, W}, 0.f), img(Shape{1, H, W}, 0.1f);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      int c = 0;
      if (i >= 5 + shift && i < 10 + shift && j >= 4 && j < 9) c = 1;
      if (i >= 4 + shift && i < 6 + shift && j >= 11 && j < 14) c = 2;
      lab.at(c, i, j) = 1.f;
      img.at(0, i, j) = c == 0 ? 0.1f : 0.4f * static_cast<float>(c);
    }
  return data::Sample{img, lab, 0};
}

}  // namespace

TEST_CASE("dice") {
  const auto a = mask(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  CHECK(dice(a, a) == 100.0);
  CHECK(dice(a, mask(4, 4, {{3, 3}})) == 0.0);
  CHECK(dice(a, mask(4, 4, {{0, 0}, {1, 1}})) == doctest::Approx(66.6667).epsilon(1e-4));
  CHECK(dice(mask(4, 4, {}), mask(4, 4, {})) == 100.0);
  CHECK(dice(a, mask(4, 4, {})) == 0.0);
  Grid<float> soft = a;
  soft[0] = 0.5f;
  CHECK_THROWS_AS(dice(soft, a), std::invalid_argument);
  CHECK_THROWS_AS(dice(a, Grid<float>(Shape{1, 3, 4}, 0.f)), ShapeError);
  SUBCASE("symmetric and bounded on random masks") {
    for (std::uint64_t s = 0; s < 50; ++s) {
      auto g = testutil::random_grid<float>(Shape{1, 8, 8}, s, 0, 1), p = testutil::random_grid<float>(Shape{1, 8, 8}, s + 99, 0, 1);
      for (auto& v : g.values()) v = v > 0.6f ? 1.f : 0.f;
      for (auto& v : p.values()) v = v > 0.3f ? 1.f : 0.f;
      const double d = dice(g, p);
      CHECK(d == dice(p, g));
      CHECK(d >= 0.0);
      CHECK(d <= 100.0);
    }
  }
}

TEST_CASE("aggregate") {
  const auto r = aggregate({{100, 50}, {80, 70}});
  CHECK(r.cases == 2);
  CHECK(r.per_structure == std::vector<double>{90, 60});
  CHECK(r.mean == 75.0);
  CHECK(r.std == doctest::Approx(std::sqrt((625.0 + 625 + 25 + 25) / 4)));
}

TEST_CASE("segmentation scoring") {
  data::DatasetConfig c;
  c.n_labeled = 1;
  c.n_unlabeled = 1;
  const auto corpus = data::generate_corpus(c);
  nets::ArchConfig arch;
  SUBCASE("all-background net scores 0 on every structure") {
    auto net = nets::build_seg_net<float>(arch, 1);
    for (auto& v : net.params.at("head.weight").values()) v = 0.f;
    net.params.at("head.bias") = Grid<float>(Shape{4}, {10.f, 0.f, 0.f, 0.f});
    const auto r = evaluate_seg(net, corpus.test);
    CHECK(r.cases == corpus.test.size());
    for (double v : r.per_structure) CHECK(v == 0.0);
    CHECK(r.mean == 0.0);
  }
  SUBCASE("untrained nets stay below 30") {
    double m = 0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) m += evaluate_seg(nets::build_seg_net<float>(arch, seed), corpus.test).mean / 3;
    CHECK(m < 30.0);
  }
  SUBCASE("predictions are one-hot") {
    const auto p = predict_labels(nets::build_seg_net<float>(arch, 2), corpus.test[0].image);
    const std::size_t P = p.plane();
    for (std::size_t i = 0; i < P; ++i) {
      float s = 0;
      for (int ch = 0; ch < 4; ++ch) s += p[ch * P + i];
      CHECK(s == 1.f);
    }
  }
  SUBCASE("unlabeled test samples are rejected") {
    std::vector<data::Sample> t{corpus.unlabeled[0]};
    CHECK_THROWS_AS(evaluate_seg(nets::build_seg_net<float>(arch, 1), t), std::invalid_argument);
  }
}

TEST_CASE("registration scoring") {
  const auto fixed = square_sample(0), moved = square_sample(2);
  SUBCASE("identity pairs score 100") {
    const auto r = evaluate_fields({{&fixed, &fixed}}, {Grid<float>(Shape{2, 16, 16}, 0.f)});
    CHECK(r.mean == 100.0);
  }
  SUBCASE("an integer translation field undoes a translation") {
    // The moving structures sit 2 rows lower; sampling 2 rows down realigns them.
    Grid<float> f(Shape{2, 16, 16}, 0.f);
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) f.at(0, i, j) = 2.f;
    const auto raw = evaluate_fields({{&moved, &fixed}}, {Grid<float>(Shape{2, 16, 16}, 0.f)});
    CHECK(raw.mean < 70.0);
    CHECK(evaluate_fields({{&moved, &fixed}}, {f}).mean == 100.0);
  }
  SUBCASE("a fresh registration net equals the pre-registration baseline") {
    data::DatasetConfig c;
    c.n_labeled = 2;
    c.n_unlabeled = 1;
    c.n_test = 3;
    const auto corpus = data::generate_corpus(c);
    std::vector<RegPair> pairs;
    std::vector<std::vector<double>> table;
    for (const auto& t : corpus.test)
      for (const auto& l : corpus.labeled) {
        pairs.push_back({&l, &t});
        std::vector<double> row;
        const std::size_t P = t.label->plane();
        for (int ch = 1; ch < 4; ++ch) {
          Grid<float> a(Shape{1, 64, 64}), b(Shape{1, 64, 64});
          for (std::size_t p = 0; p < P; ++p) a[p] = (*t.label)[ch * P + p], b[p] = (*l.label)[ch * P + p];
          row.push_back(dice(a, b));
        }
        table.push_back(row);
      }
    const auto fresh = evaluate_reg(nets::build_reg_net<float>(nets::ArchConfig{}, 4), pairs);
    const auto oracle = aggregate(table);
    CHECK(fresh.mean == doctest::Approx(oracle.mean).epsilon(1e-12));
    CHECK(fresh.per_structure == oracle.per_structure);
  }
  SUBCASE("pairs need labels on both sides") {
    data::Sample bare = fixed;
    bare.label.reset();
    CHECK_THROWS_AS(evaluate_fields({{&bare, &fixed}}, {Grid<float>(Shape{2, 16, 16}, 0.f)}), std::invalid_argument);
  }
}

TEST_CASE("arms") {
  train::TrainConfig base;
  const auto full = arm_config(base, "full");
  CHECK((full.joint && full.use_dss && full.use_acm && full.use_drc));
  const auto rs = arm_config(full, "R+S");
  CHECK((rs.joint && !rs.use_dss && !rs.use_acm && !rs.use_drc));
  CHECK(arm_config(base, "R+S+DSS").use_dss);
  CHECK_FALSE(arm_config(base, "R+S+DSS").use_acm);
  CHECK(arm_config(base, "R+S+ACM").use_acm);
  CHECK(arm_config(base, "R+S+DRC").use_drc);
  const auto r = arm_config(base, "R"), s = arm_config(base, "S");
  CHECK((!r.joint && r.trains_reg() && !r.trains_seg() && !r.use_drc));
  CHECK((!s.joint && s.trains_seg() && !s.trains_reg() && !s.use_acm));
  CHECK_THROWS_AS(arm_config(base, "nope"), std::invalid_argument);
  CHECK(parse_arms("full,R+S") == std::vector<std::string>{"full", "R+S"});
  CHECK_THROWS_AS(parse_arms("full,bogus"), std::invalid_argument);
  CHECK(kArms.size() == 7);
}

TEST_CASE("report files round trip") {
  const fs::path dir = scratch("csv");
  SUBCASE("ablation") {
    std::vector<AblationRow> rows{{"full", 1, 83.25, 10.125, 92.5, 3.0625, 2000, 488.5, false},
                                  {"R+S", 2, 1.0 / 3.0, 0.1, 2.0 / 7.0, 1e-9, 2000, 12.75, false}};
    write_ablation_csv(rows, dir / "a.csv");
    CHECK(read_ablation_csv(dir / "a.csv") == rows);
    std::ifstream in(dir / "a.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == kAblationHeader);
  }
  SUBCASE("failed rows") {
    AblationRow bad{"S", 3, 0, 0, 0, 0, 0, 0, true};
    write_ablation_csv({bad}, dir / "f.csv");
    const auto back = read_ablation_csv(dir / "f.csv");
    REQUIRE(back.size() == 1);
    CHECK(back[0].failed);
    CHECK(back[0].arm == "S");
  }
  SUBCASE("sweep") {
    std::vector<SweepRow> rows{{1, "full", 1, 71.125, 9.5, false}, {10, "S", 3, 0.1 + 0.2, 4.0, false}};
    write_sweep_csv(rows, dir / "s.csv");
    CHECK(read_sweep_csv(dir / "s.csv") == rows);
  }
  SUBCASE("malformed files are rejected") {
    std::ofstream(dir / "bad.csv") << "wrong,header\n1,2\n";
    CHECK_THROWS(read_ablation_csv(dir / "bad.csv"));
    CHECK_THROWS(read_sweep_csv(dir / "missing.csv"));
  }
  SUBCASE("run records") {
    RunRecord r;
    r.arm = "full";
    r.labels = 4;
    r.seed = 2;
    r.seg = aggregate({{90, 80, 70}});
    r.reg = aggregate({{60, 50, 40}, {1, 2, 3}});
    r.steps = 2000;
    r.tail_L_D = 0.5;
    const auto back = run_record_from_json(to_json(r));
    CHECK(to_json(back) == to_json(r));
    write_records_json({r.seg, r.reg}, dir / "m.json");
    write_records_csv({r.seg, r.reg}, dir / "m.csv");
    CHECK(fs::file_size(dir / "m.json") > 0);
    CHECK(fs::file_size(dir / "m.csv") > 0);
  }
  fs::remove_all(dir);
}

TEST_CASE("PGM dumps") {
  const fs::path dir = scratch("pgm");
  Grid<float> g(Shape{1, 2, 3}, {0.f, 0.5f, 1.f, -1.f, 2.f, 0.25f});
  write_pgm(g, dir / "u.pgm", true);
  int h = 0, w = 0;
  auto px = read_pgm(dir / "u.pgm", h, w);
  CHECK(h == 2);
  CHECK(w == 3);
  CHECK(px == std::vector<unsigned char>{0, 128, 255, 0, 255, 64});
  write_pgm(g, dir / "m.pgm", false);
  px = read_pgm(dir / "m.pgm", h, w);
  CHECK(px[3] == 0);
  CHECK(px[4] == 255);
  CHECK(px[0] == 85);
  write_pgm(Grid<float>(Shape{1, 2, 2}, 0.7f), dir / "c.pgm", false);
  CHECK(read_pgm(dir / "c.pgm", h, w) == std::vector<unsigned char>{0, 0, 0, 0});
  CHECK_THROWS(write_pgm(Grid<float>(Shape{2, 2, 2}, 0.f), dir / "x.pgm", true));
  fs::remove_all(dir);
}
