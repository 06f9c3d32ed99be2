#include "regseg/optim.hpp"

#include <cmath>

namespace regseg::diff {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "rmsprop"; }

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "rmsprop") return OptimizerKind::rmsprop;
  throw std::invalid_argument("unknown optimizer kind '" + s + "'");
}

template <typename T>
OptimizerState<T> OptimizerState<T>::init(const OptimizerSettings& s, const ParamSet<T>& params) {
  if (!(s.learning_rate >= 0) || !std::isfinite(s.learning_rate))
    throw std::invalid_argument("optimizer: learning rate must be finite and non-negative");
  OptimizerState st;
  st.settings = s;
  for (const auto& [name, p] : params) {
    st.second_moment.emplace(name, Grid<T>(p.shape(), T(0)));
    if (s.kind == OptimizerKind::adam) st.first_moment.emplace(name, Grid<T>(p.shape(), T(0)));
  }
  return st;
}

template <typename T>
void optimizer_step(OptimizerState<T>& state, ParamSet<T>& params, const Gradients<T>& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) continue;
    require_same_shape(g.shape(), it->second.shape(), "optimizer_step");
    for (T v : g.values())
      if (!std::isfinite(v)) throw NonFiniteGradient(name);
  }

  const auto& s = state.settings;
  ++state.step;
  const T lr = static_cast<T>(s.learning_rate);
  const T eps = static_cast<T>(s.epsilon);

  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    const T* g = git == grads.end() ? nullptr : git->second.data();
    auto& v = state.second_moment.at(name);
    require_same_shape(v.shape(), p.shape(), "optimizer accumulator");
    if (s.kind == OptimizerKind::rmsprop) {
      const T rho = static_cast<T>(s.decay);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T gi = g ? g[i] : T(0);
        v[i] = rho * v[i] + (T(1) - rho) * gi * gi;
        p[i] -= lr * gi / (std::sqrt(v[i]) + eps);
      }
    } else {
      auto& m = state.first_moment.at(name);
      const T b1 = static_cast<T>(s.beta1), b2 = static_cast<T>(s.beta2);
      const T c1 = T(1) - static_cast<T>(std::pow(s.beta1, static_cast<double>(state.step)));
      const T c2 = T(1) - static_cast<T>(std::pow(s.beta2, static_cast<double>(state.step)));
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T gi = g ? g[i] : T(0);
        m[i] = b1 * m[i] + (T(1) - b1) * gi;
        v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void optimizer_step(OptimizerState<float>&, ParamSet<float>&, const Gradients<float>&);
template void optimizer_step(OptimizerState<double>&, ParamSet<double>&, const Gradients<double>&);

}  // namespace regseg::diff
