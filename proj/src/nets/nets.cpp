#include "regseg/nets.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "regseg/ops.hpp"
#include "regseg/rng.hpp"

namespace regseg::nets {

using diff::Var;

std::string to_string(Role r) {
  switch (r) {
    case Role::reg: return "reg";
    case Role::seg: return "seg";
    case Role::disc: return "disc";
  }
  return "?";
}

void ArchConfig::validate() const {
  if (levels < 1) throw std::invalid_argument("arch: levels must be >= 1");
  if (base_channels < 4) throw std::invalid_argument("arch: base_channels must be >= 4");
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("arch: kernel must be odd");
  if (num_classes < 2) throw std::invalid_argument("arch: num_classes must be >= 2");
  if (!(leaky_slope >= 0 && leaky_slope < 1)) throw std::invalid_argument("arch: leaky_slope in [0,1)");
}

int input_channels(Role role) { return role == Role::seg ? 1 : 2; }

int output_channels(Role role, const ArchConfig& cfg) {
  switch (role) {
    case Role::reg: return 2;
    case Role::seg: return cfg.num_classes;
    case Role::disc: return 1;
  }
  return 0;
}

namespace {

int width_at(const ArchConfig& cfg, int level) {
  return level == 0 ? cfg.base_channels : 2 * cfg.base_channels;
}

}  // namespace

std::vector<LayerSpec> layer_plan(Role role, const ArchConfig& cfg) {
  cfg.validate();
  std::vector<LayerSpec> plan;
  const int k = cfg.kernel;
  plan.push_back({"enc0", input_channels(role), width_at(cfg, 0), k});
  for (int l = 1; l <= cfg.levels; ++l)
    plan.push_back({"enc" + std::to_string(l), width_at(cfg, l - 1), width_at(cfg, l), k});
  for (int l = cfg.levels - 1; l >= 0; --l)
    plan.push_back({"dec" + std::to_string(l), width_at(cfg, l + 1) + width_at(cfg, l), width_at(cfg, l), k});
  // The flow head keeps a spatial kernel; class and confidence heads are 1x1.
  plan.push_back({"head", width_at(cfg, 0), output_channels(role, cfg), role == Role::reg ? k : 1});
  return plan;
}

void require_compatible(const ArchConfig& cfg, int height, int width) {
  const int m = 1 << cfg.levels;
  if (height % m || width % m)
    throw ShapeError("network input " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by 2^levels = " + std::to_string(m));
}

template <typename T>
NetworkHandle<T> build_network(Role role, const ArchConfig& cfg, std::uint64_t seed) {
  NetworkHandle<T> net;
  net.role = role;
  net.arch = cfg;
  net.init_seed = seed;
  Rng rng(seed);
  const double gain = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
  for (const LayerSpec& layer : layer_plan(role, cfg)) {
    Grid<T> w(Shape{layer.out_channels, layer.in_channels, layer.kernel, layer.kernel});
    Grid<T> b(Shape{layer.out_channels}, T(0));
    const bool zero_head = role == Role::reg && layer.name == "head";
    if (!zero_head) {
      const double fan_in = static_cast<double>(layer.in_channels) * layer.kernel * layer.kernel;
      const double sd = std::sqrt(gain / fan_in);
      for (auto& v : w.values()) v = static_cast<T>(sd * normal(rng));
    }
    net.params.emplace(layer.name + ".weight", std::move(w));
    net.params.emplace(layer.name + ".bias", std::move(b));
  }
  return net;
}

template <typename T>
std::size_t NetworkHandle<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, g] : params) n += g.size();
  return n;
}

template <typename T>
Var<T> NetworkHandle<T>::forward(const Var<T>& input, bool trainable) const {
  require_rank(input.shape(), 3, "network forward");
  if (input.shape()[0] != input_channels(role))
    throw ShapeError(to_string(role) + " network expects " + std::to_string(input_channels(role)) +
                     " input channels, got " + shape_str(input.shape()));
  require_compatible(arch, input.shape()[1], input.shape()[2]);

  const auto p = diff::bind_params(params, trainable, leaf_prefix());
  const T slope = static_cast<T>(arch.leaky_slope);
  auto conv = [&](const std::string& name, const Var<T>& x) {
    const Var<T>& w = p.at(name + ".weight");
    return diff::conv2d(x, w, p.at(name + ".bias"), 1, w.shape()[2] / 2);
  };
  auto block = [&](const std::string& name, const Var<T>& x) {
    return diff::leaky_relu(conv(name, x), slope);
  };

  std::vector<Var<T>> skips;
  Var<T> x = block("enc0", input);
  skips.push_back(x);
  for (int l = 1; l <= arch.levels; ++l) {
    x = block("enc" + std::to_string(l), diff::avg_pool2(x));
    skips.push_back(x);
  }
  for (int l = arch.levels - 1; l >= 0; --l)
    x = block("dec" + std::to_string(l),
              diff::concat_channels(diff::resize_nearest_double(x), skips[static_cast<std::size_t>(l)]));
  Var<T> out = conv("head", x);
  switch (role) {
    case Role::reg: return out;
    case Role::seg: return diff::softmax_channel(out);
    case Role::disc: return diff::sigmoid(out);
  }
  return out;
}

template struct NetworkHandle<float>;
template struct NetworkHandle<double>;
template NetworkHandle<float> build_network<float>(Role, const ArchConfig&, std::uint64_t);
template NetworkHandle<double> build_network<double>(Role, const ArchConfig&, std::uint64_t);

}  // namespace regseg::nets
