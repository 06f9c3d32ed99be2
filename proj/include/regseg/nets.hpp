#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "regseg/tape.hpp"

namespace regseg::nets {

enum class Role { reg, seg, disc };

std::string to_string(Role r);

struct ArchConfig {
  int levels = 3;
  int base_channels = 16;
  int kernel = 3;
  double leaky_slope = 0.2;
  int num_classes = 4;

  void validate() const;
};

/// One convolution of the encoder-decoder, in execution order.
struct LayerSpec {
  std::string name;
  int in_channels;
  int out_channels;
  int kernel;
};

/// Layers for a role: enc0..encL, decL-1..dec0, then a head conv.
/// Level l runs at resolution / 2^l with width base * (l == 0 ? 1 : 2).
std::vector<LayerSpec> layer_plan(Role role, const ArchConfig& cfg);

int input_channels(Role role);
int output_channels(Role role, const ArchConfig& cfg);

template <typename T>
struct NetworkHandle {
  Role role = Role::seg;
  ArchConfig arch;
  std::uint64_t init_seed = 0;
  diff::ParamSet<T> params;

  /// reg: [2,H,W] -> raw field [2,H,W]; seg: [1,H,W] -> softmax [C,H,W];
  /// disc: [2,H,W] -> sigmoid map [1,H,W]. Frozen parameters (trainable =
  /// false) still pass gradients through to the input. Trainable leaves are
  /// named leaf_prefix() + key.
  diff::Var<T> forward(const diff::Var<T>& input, bool trainable) const;

  std::string leaf_prefix() const { return to_string(role) + "/"; }
  /// Gradient of `loss` for each parameter of this network.
  diff::Gradients<T> gradients(const diff::Var<T>& loss) const { return diff::backward(loss, params, leaf_prefix()); }

  std::size_t parameter_count() const;
};

/// Throws ShapeError unless H and W are divisible by 2^levels.
void require_compatible(const ArchConfig& cfg, int height, int width);

/// He fan-in init from a seeded stream; the registration head starts at zero.
template <typename T>
NetworkHandle<T> build_network(Role role, const ArchConfig& cfg, std::uint64_t seed);

template <typename T>
NetworkHandle<T> build_reg_net(const ArchConfig& cfg, std::uint64_t seed) {
  return build_network<T>(Role::reg, cfg, seed);
}
template <typename T>
NetworkHandle<T> build_seg_net(const ArchConfig& cfg, std::uint64_t seed) {
  return build_network<T>(Role::seg, cfg, seed);
}
template <typename T>
NetworkHandle<T> build_disc_net(const ArchConfig& cfg, std::uint64_t seed) {
  return build_network<T>(Role::disc, cfg, seed);
}

template <typename T, typename U>
NetworkHandle<U> cast_network(const NetworkHandle<T>& net) {
  NetworkHandle<U> out;
  out.role = net.role;
  out.arch = net.arch;
  out.init_seed = net.init_seed;
  for (const auto& [k, v] : net.params) out.params.emplace(k, v.template cast<U>());
  return out;
}

}  // namespace regseg::nets
