#include "regseg/evalkit.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "regseg/ops.hpp"
#include "regseg/warp.hpp"

namespace regseg::eval {

namespace fs = std::filesystem;
using nlohmann::json;

double dice(const Grid<float>& g, const Grid<float>& p) {
  require_same_shape(g.shape(), p.shape(), "dice");
  std::size_t ng = 0, np = 0, both = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const float a = g[i], b = p[i];
    if ((a != 0.0f && a != 1.0f) || (b != 0.0f && b != 1.0f))
      throw std::invalid_argument("dice: masks must be binary");
    ng += a == 1.0f;
    np += b == 1.0f;
    both += a == 1.0f && b == 1.0f;
  }
  if (ng + np == 0) return 100.0;
  return 200.0 * static_cast<double>(both) / static_cast<double>(ng + np);
}

MetricsRecord aggregate(const std::vector<std::vector<double>>& table) {
  MetricsRecord r;
  r.cases = table.size();
  if (table.empty()) return r;
  const std::size_t K = table.front().size();
  r.per_structure.assign(K, 0.0);
  double sum = 0, n = 0;
  for (const auto& row : table)
    for (std::size_t k = 0; k < K; ++k) {
      r.per_structure[k] += row[k] / static_cast<double>(table.size());
      sum += row[k];
      n += 1;
    }
  r.mean = sum / n;
  double ss = 0;
  for (const auto& row : table)
    for (double v : row) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / n);
  return r;
}

namespace {

Grid<float> channel_mask(const Grid<float>& onehot, int c) {
  const std::size_t P = onehot.plane();
  Grid<float> m(Shape{1, onehot.height(), onehot.width()}, 0.0f);
  for (std::size_t p = 0; p < P; ++p) m[p] = onehot[static_cast<std::size_t>(c) * P + p] > 0.5f ? 1.0f : 0.0f;
  return m;
}

std::vector<double> structure_dice(const Grid<float>& truth, const Grid<float>& pred) {
  require_same_shape(truth.shape(), pred.shape(), "structure dice");
  std::vector<double> row;
  for (int c = 1; c < truth.channels(); ++c) row.push_back(dice(channel_mask(truth, c), channel_mask(pred, c)));
  return row;
}

}  // namespace

Grid<float> predict_labels(const nets::NetworkHandle<float>& seg, const Grid<float>& image) {
  return warp::harden(seg.forward(diff::Var<float>::constant(image), false).value());
}

MetricsRecord evaluate_seg(const nets::NetworkHandle<float>& seg, const std::vector<data::Sample>& test) {
  std::vector<std::vector<double>> table;
  for (const auto& s : test) {
    if (!s.label) throw std::invalid_argument("evaluate_seg: test sample without label");
    table.push_back(structure_dice(*s.label, predict_labels(seg, s.image)));
  }
  return aggregate(table);
}

MetricsRecord evaluate_fields(const std::vector<RegPair>& pairs, const std::vector<Grid<float>>& fields) {
  if (pairs.size() != fields.size()) throw std::invalid_argument("evaluate_fields: one field per pair");
  std::vector<std::vector<double>> table;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& mv = *pairs[i].moving;
    const auto& fx = *pairs[i].fixed;
    if (!mv.label || !fx.label) throw std::invalid_argument("evaluate_reg: both pair members need labels");
    const warp::DisplacementField<float> phi(diff::Var<float>::constant(fields[i]));
    const Grid<float> warped = warp::harden(warp::warp_label(diff::Var<float>::constant(*mv.label), phi).value());
    table.push_back(structure_dice(*fx.label, warped));
  }
  return aggregate(table);
}

MetricsRecord evaluate_reg(const nets::NetworkHandle<float>& reg, const std::vector<RegPair>& pairs) {
  std::vector<Grid<float>> fields;
  for (const auto& p : pairs) {
    const auto in = diff::concat_channels(diff::Var<float>::constant(p.moving->image),
                                          diff::Var<float>::constant(p.fixed->image));
    fields.push_back(reg.forward(in, false).value());
  }
  return evaluate_fields(pairs, fields);
}

TestSet load_test_set(const data::DatasetManifest& m) {
  TestSet ts;
  for (const auto& e : m.test) ts.test.push_back(m.load(e, true));
  for (const auto& e : m.labeled) ts.atlas.push_back(m.load(e, true));
  for (const auto& [t, l] : m.test_pairs)
    ts.pairs.push_back(RegPair{&ts.atlas.at(static_cast<std::size_t>(l)), &ts.test.at(static_cast<std::size_t>(t))});
  return ts;
}

train::TrainConfig arm_config(const train::TrainConfig& base, const std::string& arm) {
  train::TrainConfig c = base;
  c.joint = true;
  c.train_reg = c.train_seg = true;
  c.use_dss = c.use_acm = c.use_drc = false;
  if (arm == "R") {
    c.joint = false;
    c.train_seg = false;
  } else if (arm == "S") {
    c.joint = false;
    c.train_reg = false;
  } else if (arm == "R+S") {
  } else if (arm == "R+S+DSS") {
    c.use_dss = true;
  } else if (arm == "R+S+ACM") {
    c.use_acm = true;
  } else if (arm == "R+S+DRC") {
    c.use_drc = true;
  } else if (arm == "full") {
    c.use_dss = c.use_acm = c.use_drc = true;
  } else {
    throw std::invalid_argument("unknown arm '" + arm + "' (expected one of R, S, R+S, R+S+DSS, R+S+ACM, R+S+DRC, full)");
  }
  return c;
}

std::vector<std::string> parse_arms(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string a;
  while (std::getline(ss, a, ','))
    if (!a.empty()) {
      arm_config(train::TrainConfig{}, a);
      out.push_back(a);
    }
  if (out.empty()) throw std::invalid_argument("no arms given");
  return out;
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char b[40];
  std::snprintf(b, sizeof(b), "%.17g", v);
  return b;
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string c;
  while (std::getline(ss, c, ',')) cells.push_back(c);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const char* header, std::size_t width) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != header) throw std::runtime_error(path.string() + ": unexpected header");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto cells = split_row(line);
    if (cells.size() != width) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

}  // namespace

void write_ablation_csv(const std::vector<AblationRow>& rows, const fs::path& path) {
  auto os = open_out(path);
  os << kAblationHeader << '\n';
  for (const auto& r : rows)
    os << r.arm << ',' << r.seed << ',' << num(r.r_dice_mean) << ',' << num(r.r_dice_std) << ','
       << num(r.s_dice_mean) << ',' << num(r.s_dice_std) << ',' << (r.failed ? -1 : r.steps) << ','
       << num(r.wall_s) << '\n';
}

std::vector<AblationRow> read_ablation_csv(const fs::path& path) {
  std::vector<AblationRow> out;
  for (const auto& c : read_csv(path, kAblationHeader, 8)) {
    AblationRow r;
    r.arm = c[0];
    r.seed = std::stoull(c[1]);
    r.r_dice_mean = std::stod(c[2]);
    r.r_dice_std = std::stod(c[3]);
    r.s_dice_mean = std::stod(c[4]);
    r.s_dice_std = std::stod(c[5]);
    r.steps = std::stoi(c[6]);
    r.wall_s = std::stod(c[7]);
    r.failed = r.steps < 0;
    if (r.failed) r.steps = 0;
    out.push_back(r);
  }
  return out;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const fs::path& path) {
  auto os = open_out(path);
  os << kSweepHeader << '\n';
  for (const auto& r : rows)
    os << r.labels << ',' << r.arm << ',' << r.seed << ',' << num(r.s_dice_mean) << ',' << num(r.s_dice_std)
       << '\n';
}

std::vector<SweepRow> read_sweep_csv(const fs::path& path) {
  std::vector<SweepRow> out;
  for (const auto& c : read_csv(path, kSweepHeader, 5)) {
    SweepRow r;
    r.labels = std::stoi(c[0]);
    r.arm = c[1];
    r.seed = std::stoull(c[2]);
    r.s_dice_mean = std::stod(c[3]);
    r.s_dice_std = std::stod(c[4]);
    r.failed = std::isnan(r.s_dice_mean);
    out.push_back(r);
  }
  return out;
}

namespace {

json metrics_json(const MetricsRecord& m) {
  return json{{"arm", m.arm},   {"seed", m.seed}, {"step", m.step}, {"per_structure", m.per_structure},
              {"mean", m.mean}, {"std", m.std},   {"cases", m.cases}};
}

MetricsRecord metrics_from(const json& j) {
  MetricsRecord m;
  m.arm = j.at("arm").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.step = j.at("step").get<int>();
  m.per_structure = j.at("per_structure").get<std::vector<double>>();
  m.mean = j.at("mean").get<double>();
  m.std = j.at("std").get<double>();
  m.cases = j.at("cases").get<std::size_t>();
  return m;
}

}  // namespace

json to_json(const RunRecord& r) {
  return json{{"arm", r.arm},
              {"labels", r.labels},
              {"seed", r.seed},
              {"reg", metrics_json(r.reg)},
              {"seg", metrics_json(r.seg)},
              {"steps", r.steps},
              {"wall_s", r.wall_s},
              {"tail_L_D", r.tail_L_D},
              {"tail_confidence", r.tail_confidence},
              {"error", r.error}};
}

RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.arm = j.at("arm").get<std::string>();
  r.labels = j.at("labels").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.reg = metrics_from(j.at("reg"));
  r.seg = metrics_from(j.at("seg"));
  r.steps = j.at("steps").get<int>();
  r.wall_s = j.at("wall_s").get<double>();
  r.tail_L_D = j.at("tail_L_D").get<double>();
  r.tail_confidence = j.at("tail_confidence").get<double>();
  r.error = j.at("error").get<std::string>();
  return r;
}

void write_records_json(const std::vector<MetricsRecord>& records, const fs::path& path) {
  if (records.empty()) throw std::invalid_argument("no records to report");
  json a = json::array();
  for (const auto& r : records) a.push_back(metrics_json(r));
  auto os = open_out(path);
  os << a.dump(2) << '\n';
}

void write_records_csv(const std::vector<MetricsRecord>& records, const fs::path& path) {
  if (records.empty()) throw std::invalid_argument("no records to report");
  auto os = open_out(path);
  const std::size_t K = records.front().per_structure.size();
  os << "arm,seed,step,cases,mean,std";
  for (std::size_t k = 0; k < K; ++k) os << ",dice_s" << k + 1;
  os << '\n';
  for (const auto& r : records) {
    os << r.arm << ',' << r.seed << ',' << r.step << ',' << r.cases << ',' << num(r.mean) << ',' << num(r.std);
    for (double v : r.per_structure) os << ',' << num(v);
    os << '\n';
  }
}

void write_pgm(const Grid<float>& g, const fs::path& path, bool unit) {
  if (g.rank() < 2) throw ShapeError("write_pgm: need at least two dims");
  if (g.size() != static_cast<std::size_t>(g.dim(g.rank() - 2)) * g.dim(g.rank() - 1))
    throw ShapeError("write_pgm: expected a single plane, got " + shape_str(g.shape()));
  const int H = g.dim(g.rank() - 2), W = g.dim(g.rank() - 1);
  const std::size_t P = static_cast<std::size_t>(H) * W;
  float lo = 0, hi = 1;
  if (!unit) {
    lo = hi = g[0];
    for (std::size_t i = 0; i < P; ++i) lo = std::min(lo, g[i]), hi = std::max(hi, g[i]);
  }
  std::string bytes(P, '\0');
  for (std::size_t i = 0; i < P; ++i) {
    double v = hi > lo ? (g[i] - lo) / static_cast<double>(hi - lo) : 0.0;
    v = std::clamp(v, 0.0, 1.0);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::floor(v * 255.0 + 0.5)));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << W << ' ' << H << "\n255\n";
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::vector<unsigned char> read_pgm(const fs::path& path, int& height, int& width) {
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  int maxval = 0;
  is >> magic >> width >> height >> maxval;
  if (!is || magic != "P5" || maxval != 255) throw std::runtime_error(path.string() + ": not a P5/255 PGM");
  is.get();
  std::vector<unsigned char> px(static_cast<std::size_t>(width) * height);
  is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!is) throw std::runtime_error(path.string() + ": truncated PGM");
  return px;
}

}  // namespace regseg::eval
