#pragma once

// Brute-force loss references written with plain loops.

#include <algorithm>
#include <cmath>

#include "regseg/grid.hpp"
#include "regseg/losses.hpp"

namespace oracle {

using regseg::Grid;

// Window statistics over in-image neighbours, per pixel.
inline double cc(const Grid<double>& a, const Grid<double>& b, int win) {
  const int H = a.height(), W = a.width(), r = win / 2;
  double total = 0;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const int y0 = std::max(0, i - r), y1 = std::min(H - 1, i + r);
      const int x0 = std::max(0, j - r), x1 = std::min(W - 1, j + r);
      double n = 0, ma = 0, mb = 0;
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) ma += a.at(0, y, x), mb += b.at(0, y, x), ++n;
      ma /= n;
      mb /= n;
      double sab = 0, saa = 0, sbb = 0;
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double da = a.at(0, y, x) - ma, db = b.at(0, y, x) - mb;
          sab += da * db, saa += da * da, sbb += db * db;
        }
      total += sab * sab / (saa * sbb + regseg::loss::kCcEps);
    }
  return -total / (H * W);
}

inline double smoothness(const Grid<double>& f) {
  double s = 0, n = 0;
  for (int ch = 0; ch < 2; ++ch)
    for (int i = 0; i < f.height(); ++i)
      for (int j = 0; j < f.width(); ++j) {
        if (i + 1 < f.height()) s += std::pow(f.at(ch, i + 1, j) - f.at(ch, i, j), 2), ++n;
        if (j + 1 < f.width()) s += std::pow(f.at(ch, i, j + 1) - f.at(ch, i, j), 2), ++n;
      }
  return s / n;
}

inline double disc(const Grid<double>& d_ref, const Grid<double>& d_warp) {
  double s = 0;
  for (std::size_t i = 0; i < d_ref.size(); ++i)
    s += -std::log(d_ref[i] + regseg::loss::kLogEps) - std::log(1 - d_warp[i] + regseg::loss::kLogEps);
  return s / static_cast<double>(d_ref.size());
}

inline double adv(const Grid<double>& d_warp) {
  double s = 0;
  for (double v : d_warp.values()) s -= std::log(v + regseg::loss::kLogEps);
  return s / static_cast<double>(d_warp.size());
}

// Mean over pixels of weight * cross-entropy; weight == nullptr means 1.
inline double weighted_ce(const Grid<double>* weight, const Grid<double>& target, const Grid<double>& pred) {
  const std::size_t P = pred.plane();
  double s = 0;
  for (std::size_t p = 0; p < P; ++p) {
    double ce = 0;
    for (int c = 0; c < pred.channels(); ++c) ce -= target[c * P + p] * std::log(pred[c * P + p] + regseg::loss::kLogEps);
    s += (weight ? (*weight)[p] : 1.0) * ce;
  }
  return s / static_cast<double>(P);
}

inline double mse(const Grid<double>& a, const Grid<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace oracle
