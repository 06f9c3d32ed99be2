#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "regseg/evalkit.hpp"
#include "regseg/gradsuite.hpp"
#include "regseg/losses.hpp"
#include "regseg/trainer.hpp"
#include "regseg/warp.hpp"

namespace py = pybind11;
using namespace regseg;
using nlohmann::json;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

// (H,W) is read as a single plane.
Grid<double> to_grid(const Array& a, const char* name) {
  const auto info = a.request();
  Shape s(info.shape.begin(), info.shape.end());
  if (s.size() == 2) s.insert(s.begin(), 1);
  if (s.size() != 3) throw ShapeError(std::string(name) + " must be (H,W) or (C,H,W)");
  const auto* p = static_cast<const double*>(info.ptr);
  return Grid<double>(s, std::vector<double>(p, p + a.size()));
}

template <typename T>
Array to_array(const Grid<T>& g) {
  Array out(std::vector<py::ssize_t>(g.shape().begin(), g.shape().end()));
  auto* p = out.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) p[i] = static_cast<double>(g[i]);
  return out;
}

diff::Var<double> cst(const Grid<double>& g) { return diff::Var<double>::constant(g); }

data::DatasetManifest load_manifest(const std::string& dir) {
  std::filesystem::path p = dir;
  if (std::filesystem::is_directory(p)) p /= "manifest.json";
  return data::DatasetManifest::load_file(p);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Joint registration and segmentation on synthetic 2-D scenes";
  m.attr("__version__") = REGSEG_VERSION;

  m.def("default_train_config", [] { return json(train::TrainConfig{}).dump(); });
  m.def("default_dataset_config", [] { return json(data::DatasetConfig{}).dump(); });
  m.def("train_config_hash", [](const std::string& cfg, const std::string& corpus_id) {
    return train::config_hash(json::parse(cfg).get<train::TrainConfig>(), corpus_id);
  });

  m.def(
      "local_cc",
      [](const Array& a, const Array& b, int window) {
        return loss::local_cc(cst(to_grid(a, "a")), cst(to_grid(b, "b")), window).value()[0];
      },
      py::arg("warped"), py::arg("fixed"), py::arg("window") = 9);
  m.def("smoothness", [](const Array& phi) {
    return loss::smoothness(warp::DisplacementField<double>(cst(to_grid(phi, "phi")))).value()[0];
  });
  m.def("warp_image", [](const Array& img, const Array& phi) {
    const warp::DisplacementField<double> f(cst(to_grid(phi, "phi")));
    return to_array(warp::warp_image(cst(to_grid(img, "image")), f).value());
  });
  m.def("dice", [](const Array& g, const Array& p) {
    const auto gg = to_grid(g, "g"), pp = to_grid(p, "p");
    Grid<float> gf(gg.shape(), 0.f), pf(pp.shape(), 0.f);
    for (std::size_t i = 0; i < gg.size(); ++i) gf[i] = static_cast<float>(gg[i]);
    for (std::size_t i = 0; i < pp.size(); ++i) pf[i] = static_cast<float>(pp[i]);
    return eval::dice(gf, pf);
  });

  m.def(
      "generate_sample",
      [](std::uint64_t seed, const std::string& dataset_cfg) {
        const auto c = json::parse(dataset_cfg).get<data::DatasetConfig>();
        const auto tmpl = data::SceneTemplate::standard(c.height, c.width, c.structures, c.distractors);
        const auto s = data::generate_sample(tmpl, c.generator, seed);
        return py::make_tuple(to_array(s.image), to_array(*s.label));
      },
      py::arg("seed"), py::arg("dataset_config"));

  m.def(
      "gradient_suite",
      [](int size, double eps, std::uint64_t seed) {
        std::vector<py::tuple> out;
        for (const auto& e : loss::gradient_suite(size, eps, seed))
          out.push_back(py::make_tuple(e.name, e.max_rel_error, e.probed));
        return out;
      },
      py::arg("size") = 16, py::arg("eps") = 1e-5, py::arg("seed") = 0);

  m.def(
      "make_dataset",
      [](const std::string& cfg, const std::string& out, bool force) {
        return data::make_dataset(json::parse(cfg).get<data::DatasetConfig>(), out, force).to_json().dump();
      },
      py::arg("config"), py::arg("out_dir"), py::arg("force") = false);

  m.def(
      "train",
      [](const std::string& cfg, const std::string& data_dir, const std::string& out) {
        const auto c = json::parse(cfg).get<train::TrainConfig>();
        train::RunOptions opt;
        opt.out_dir = out;
        train::RunResult r;
        {
          py::gil_scoped_release release;
          r = train::run_training(c, load_manifest(data_dir), opt);
        }
        return json{{"steps", r.logs.size()},
                    {"wall_s", r.wall_s},
                    {"tail_L_D", r.tail_L_D},
                    {"tail_confidence", r.tail_confidence},
                    {"final_L_reg", r.logs.empty() ? 0.0 : r.logs.back().L_reg},
                    {"final_L_seg", r.logs.empty() ? 0.0 : r.logs.back().L_seg}}
            .dump();
      },
      py::arg("config"), py::arg("data_dir"), py::arg("out_dir"));

  m.def(
      "evaluate",
      [](const std::string& data_dir, const std::string& checkpoint) {
        const auto man = load_manifest(data_dir);
        std::map<std::string, Grid<float>> tensors;
        json header;
        train::read_checkpoint(checkpoint, tensors, &header);
        train::Trainer<float> t(header.at("config").get<train::TrainConfig>(), man.num_classes());
        const auto info = train::load_checkpoint(t, man.corpus_id, checkpoint, true);
        const auto ts = eval::load_test_set(man);
        const auto seg = eval::evaluate_seg(t.seg, ts.test);
        const auto reg = eval::evaluate_reg(t.reg, ts.pairs);
        return json{{"step", info.step},
                    {"s_dice", seg.mean},
                    {"s_dice_std", seg.std},
                    {"r_dice", reg.mean},
                    {"r_dice_std", reg.std}}
            .dump();
      },
      py::arg("data_dir"), py::arg("checkpoint"));
}
