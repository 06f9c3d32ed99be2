#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "regseg/trainer.hpp"

namespace regseg::train {

using nlohmann::json;

namespace {

void require_keys(const json& j, const char* what, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + " must be a JSON object");
  std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown key '" + k + "' in " + what);
  for (const char* k : keys)
    if (!j.contains(k)) throw std::invalid_argument(std::string("missing key '") + k + "' in " + what);
}

json opt_json(const diff::OptimizerSettings& s) {
  return json{{"kind", diff::to_string(s.kind)}, {"learning_rate", s.learning_rate}, {"decay", s.decay},
              {"beta1", s.beta1}, {"beta2", s.beta2}, {"epsilon", s.epsilon}};
}

diff::OptimizerSettings opt_from(const json& j, const char* what) {
  require_keys(j, what, {"kind", "learning_rate", "decay", "beta1", "beta2", "epsilon"});
  diff::OptimizerSettings s;
  s.kind = diff::optimizer_kind_from_string(j.at("kind").get<std::string>());
  s.learning_rate = j.at("learning_rate").get<double>();
  s.decay = j.at("decay").get<double>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  return s;
}

void check_opt(const diff::OptimizerSettings& s, const char* what) {
  auto bad = [&](const std::string& m) { throw std::invalid_argument(std::string(what) + ": " + m); };
  if (!std::isfinite(s.learning_rate) || s.learning_rate < 0) bad("learning_rate must be finite and >= 0");
  if (!(s.decay >= 0 && s.decay < 1)) bad("decay must lie in [0,1)");
  if (!(s.beta1 >= 0 && s.beta1 < 1) || !(s.beta2 >= 0 && s.beta2 < 1)) bad("betas must lie in [0,1)");
  if (!(s.epsilon > 0)) bad("epsilon must be positive");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  weights.validate();
  arch.validate();
  check_opt(reg_opt, "reg_opt");
  check_opt(disc_opt, "disc_opt");
  check_opt(seg_opt, "seg_opt");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (!(beta >= 0 && beta <= 1)) throw std::invalid_argument("beta must lie in [0,1]");
  if (cc_window < 1 || cc_window % 2 == 0) throw std::invalid_argument("cc_window must be odd and positive");
  if (!joint && train_reg == train_seg)
    throw std::invalid_argument("a non-joint arm trains exactly one of reg and seg");
  if (seg_only_reg_warmup < 0) throw std::invalid_argument("seg_only_reg_warmup must be >= 0");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"weights",
            {{"adv", c.weights.adv}, {"drc", c.weights.drc}, {"cc", c.weights.cc}, {"R", c.weights.smooth},
             {"acm", c.weights.acm}, {"ce", c.weights.ce}}},
           {"arch",
            {{"levels", c.arch.levels}, {"base_channels", c.arch.base_channels}, {"kernel", c.arch.kernel},
             {"leaky_slope", c.arch.leaky_slope}, {"num_classes", c.arch.num_classes}}},
           {"reg_opt", opt_json(c.reg_opt)},
           {"disc_opt", opt_json(c.disc_opt)},
           {"seg_opt", opt_json(c.seg_opt)},
           {"batch_size", c.batch_size},
           {"steps", c.steps},
           {"beta", c.beta},
           {"cc_window", c.cc_window},
           {"use_dss", c.use_dss},
           {"use_acm", c.use_acm},
           {"use_drc", c.use_drc},
           {"joint", c.joint},
           {"train_reg", c.train_reg},
           {"train_seg", c.train_seg},
           {"seg_only_reg_warmup", c.seg_only_reg_warmup},
           {"master_seed", c.master_seed},
           {"checkpoint_every", c.checkpoint_every},
           {"log_timing", c.log_timing}};
}

void from_json(const json& j, TrainConfig& c) {
  require_keys(j, "train config",
               {"weights", "arch", "reg_opt", "disc_opt", "seg_opt", "batch_size", "steps", "beta", "cc_window",
                "use_dss", "use_acm", "use_drc", "joint", "train_reg", "train_seg", "seg_only_reg_warmup",
                "master_seed", "checkpoint_every", "log_timing"});
  const json& w = j.at("weights");
  require_keys(w, "weights", {"adv", "drc", "cc", "R", "acm", "ce"});
  c.weights.adv = w.at("adv").get<double>();
  c.weights.drc = w.at("drc").get<double>();
  c.weights.cc = w.at("cc").get<double>();
  c.weights.smooth = w.at("R").get<double>();
  c.weights.acm = w.at("acm").get<double>();
  c.weights.ce = w.at("ce").get<double>();
  const json& a = j.at("arch");
  require_keys(a, "arch", {"levels", "base_channels", "kernel", "leaky_slope", "num_classes"});
  c.arch.levels = a.at("levels").get<int>();
  c.arch.base_channels = a.at("base_channels").get<int>();
  c.arch.kernel = a.at("kernel").get<int>();
  c.arch.leaky_slope = a.at("leaky_slope").get<double>();
  c.arch.num_classes = a.at("num_classes").get<int>();
  c.reg_opt = opt_from(j.at("reg_opt"), "reg_opt");
  c.disc_opt = opt_from(j.at("disc_opt"), "disc_opt");
  c.seg_opt = opt_from(j.at("seg_opt"), "seg_opt");
  c.batch_size = j.at("batch_size").get<int>();
  c.steps = j.at("steps").get<int>();
  c.beta = j.at("beta").get<double>();
  c.cc_window = j.at("cc_window").get<int>();
  c.use_dss = j.at("use_dss").get<bool>();
  c.use_acm = j.at("use_acm").get<bool>();
  c.use_drc = j.at("use_drc").get<bool>();
  c.joint = j.at("joint").get<bool>();
  c.train_reg = j.at("train_reg").get<bool>();
  c.train_seg = j.at("train_seg").get<bool>();
  c.seg_only_reg_warmup = j.at("seg_only_reg_warmup").get<int>();
  c.master_seed = j.at("master_seed").get<std::uint64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  c.log_timing = j.at("log_timing").get<bool>();
  c.validate();
}

std::uint64_t config_hash(const TrainConfig& c, const std::string& corpus_id) {
  json j = c;
  j.erase("steps");
  j.erase("checkpoint_every");
  j.erase("log_timing");
  j["corpus_id"] = corpus_id;
  const std::string text = j.dump();  // object keys are sorted
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string step_log_row(const StepLog& s) {
  std::string row = std::to_string(s.step);
  for (double v : {s.L_D, s.L_adv, s.L_drc, s.L_cc, s.L_R, s.L_reg, s.L_acm, s.L_ce, s.L_seg, s.alpha[0],
                   s.alpha[1], s.alpha[2], s.ms})
    row += "," + fmt(v);
  return row;
}

StepLog parse_step_log_row(const std::string& line) {
  std::stringstream ss(line);
  std::string cell;
  std::vector<std::string> cells;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (cells.size() != 14) throw std::runtime_error("step log row has " + std::to_string(cells.size()) + " cells");
  StepLog s;
  s.step = std::stoi(cells[0]);
  double* fields[] = {&s.L_D, &s.L_adv, &s.L_drc, &s.L_cc, &s.L_R, &s.L_reg, &s.L_acm,
                      &s.L_ce, &s.L_seg, &s.alpha[0], &s.alpha[1], &s.alpha[2], &s.ms};
  for (std::size_t i = 0; i < 13; ++i) *fields[i] = std::stod(cells[i + 1]);
  return s;
}

std::vector<StepLog> read_step_log(const std::filesystem::path& csv) {
  std::ifstream is(csv);
  if (!is) throw std::runtime_error("cannot open " + csv.string());
  std::string line;
  if (!std::getline(is, line) || line != kStepLogHeader)
    throw std::runtime_error(csv.string() + ": unexpected step log header");
  std::vector<StepLog> out;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(parse_step_log_row(line));
  return out;
}

}  // namespace regseg::train
