#pragma once

#include <cmath>
#include <cstring>
#include <random>

#include "regseg/grid.hpp"
#include "regseg/rng.hpp"
#include "regseg/tape.hpp"

namespace testutil {

using regseg::Grid;
using regseg::Shape;

template <typename T = double>
Grid<T> random_grid(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  regseg::Rng rng(seed);
  Grid<T> g(s);
  for (auto& v : g.values()) v = static_cast<T>(regseg::uniform(rng, lo, hi));
  return g;
}

/// Random per-pixel distribution over C channels (rows of a softmax).
template <typename T = double>
Grid<T> random_simplex(int C, int H, int W, std::uint64_t seed) {
  Grid<T> g = random_grid<T>(Shape{C, H, W}, seed, 0.05, 1.0);
  const std::size_t P = g.plane();
  for (std::size_t p = 0; p < P; ++p) {
    T s = 0;
    for (int c = 0; c < C; ++c) s += g[c * P + p];
    for (int c = 0; c < C; ++c) g[c * P + p] /= s;
  }
  return g;
}

/// Random hard one-hot label.
template <typename T = double>
Grid<T> random_onehot(int C, int H, int W, std::uint64_t seed) {
  regseg::Rng rng(seed);
  Grid<T> g(Shape{C, H, W}, T(0));
  const std::size_t P = g.plane();
  for (std::size_t p = 0; p < P; ++p) g[static_cast<std::size_t>(regseg::uniform01(rng) * C) * P + p] = T(1);
  return g;
}

inline bool bit_equal(const Grid<float>& a, const Grid<float>& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                                              [](float x, float y) { return std::memcmp(&x, &y, 4) == 0; });
}

inline bool bit_equal(const Grid<double>& a, const Grid<double>& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                                              [](double x, double y) { return std::memcmp(&x, &y, 8) == 0; });
}

inline double max_abs_diff(const Grid<double>& a, const Grid<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
