#pragma once

#include <cstdint>
#include <string>

#include "regseg/tape.hpp"

namespace regseg::diff {

enum class OptimizerKind { rmsprop, adam };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(const std::string& s);

/// Thrown when a gradient contains NaN/Inf; no parameter is touched.
class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient for parameter '" + param + "'"), param_(param) {}
  const std::string& param() const noexcept { return param_; }

 private:
  std::string param_;
};

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::rmsprop;
  double learning_rate = 2e-4;
  double decay = 0.9;  // RMSprop running-average factor
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

/// RMSprop keeps one accumulator per parameter ("v"), Adam two ("m", "v").
template <typename T>
struct OptimizerState {
  OptimizerSettings settings;
  std::int64_t step = 0;
  ParamSet<T> first_moment;   // Adam only
  ParamSet<T> second_moment;  // both kinds

  static OptimizerState init(const OptimizerSettings& s, const ParamSet<T>& params);
};

/// Applies one update in place. Throws NonFiniteGradient before mutating anything.
/// Parameters missing from `grads` are treated as having zero gradient.
template <typename T>
void optimizer_step(OptimizerState<T>& state, ParamSet<T>& params, const Gradients<T>& grads);

}  // namespace regseg::diff
