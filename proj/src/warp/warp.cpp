#include "regseg/warp.hpp"

#include <cmath>

#include "regseg/ops.hpp"

namespace regseg::warp {

using diff::Node;
using diff::Var;

template <typename T>
DisplacementField<T>::DisplacementField(Var<T> data) : data_(std::move(data)) {
  const Shape& s = data_.shape();
  if (s.size() != 3 || s[0] != 2)
    throw ShapeError("displacement field must have shape [2,H,W], got " + shape_str(s));
  for (T v : data_.value().values())
    if (!std::isfinite(v)) throw std::invalid_argument("displacement field contains non-finite values");
}

template <typename T>
DisplacementField<T> DisplacementField<T>::zeros(int height, int width) {
  return DisplacementField(Var<T>::constant(Grid<T>(Shape{2, height, width}, T(0))));
}

template <typename T>
DisplacementField<T> scale_field(const DisplacementField<T>& field, double alpha) {
  return DisplacementField<T>(diff::scale(field.var(), static_cast<T>(alpha)));
}

template <typename T>
std::pair<DisplacementField<T>, PerturbationDraw> dss_sample(const DisplacementField<T>& field,
                                                             Rng& rng) {
  PerturbationDraw draw{uniform01(rng)};
  return {scale_field(field, draw.alpha), draw};
}

namespace {

struct Tap {
  int y0, y1, x0, x1;
  double wy, wx;
  bool y_free, x_free;  // coordinate not clamped, so it carries a field gradient
};

template <typename T>
Tap tap_at(const Grid<T>& field, int i, int j, int H, int W) {
  const double ry = static_cast<double>(i) + static_cast<double>(field.at(0, i, j));
  const double rx = static_cast<double>(j) + static_cast<double>(field.at(1, i, j));
  Tap t{};
  t.y_free = ry > 0.0 && ry < H - 1;
  t.x_free = rx > 0.0 && rx < W - 1;
  const double y = std::clamp(ry, 0.0, static_cast<double>(H - 1));
  const double x = std::clamp(rx, 0.0, static_cast<double>(W - 1));
  t.y0 = static_cast<int>(std::floor(y));
  t.x0 = static_cast<int>(std::floor(x));
  t.y1 = std::min(t.y0 + 1, H - 1);
  t.x1 = std::min(t.x0 + 1, W - 1);
  t.wy = y - t.y0;
  t.wx = x - t.x0;
  return t;
}

}  // namespace

template <typename T>
Var<T> warp_image(const Var<T>& image, const DisplacementField<T>& field) {
  require_rank(image.shape(), 3, "warp_image");
  const int C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
  if (field.height() != H || field.width() != W)
    throw ShapeError("warp_image: image " + shape_str(image.shape()) + " vs field " +
                     shape_str(field.var().shape()));
  const Grid<T>& img = image.value();
  const Grid<T>& phi = field.value();
  Grid<T> out(image.shape());
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const Tap t = tap_at(phi, i, j, H, W);
      if (t.wy == 0.0 && t.wx == 0.0) {
        for (int c = 0; c < C; ++c) out.at(c, i, j) = img.at(c, t.y0, t.x0);
        continue;
      }
      const T wy = static_cast<T>(t.wy), wx = static_cast<T>(t.wx);
      for (int c = 0; c < C; ++c)
        out.at(c, i, j) = (T(1) - wy) * (T(1) - wx) * img.at(c, t.y0, t.x0) +
                          (T(1) - wy) * wx * img.at(c, t.y0, t.x1) +
                          wy * (T(1) - wx) * img.at(c, t.y1, t.x0) + wy * wx * img.at(c, t.y1, t.x1);
    }

  return diff::make_result<T>(
      std::move(out), {image.node(), field.var().node()}, "warp_image", [C, H, W](Node<T>& n) {
        auto& img_node = *n.inputs[0];
        auto& fld_node = *n.inputs[1];
        const Grid<T>& img = img_node.value;
        const Grid<T>& phi = fld_node.value;
        Grid<T>* dimg = img_node.requires_grad ? &img_node.grad_buffer() : nullptr;
        Grid<T>* dphi = fld_node.requires_grad ? &fld_node.grad_buffer() : nullptr;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const Tap t = tap_at(phi, i, j, H, W);
            const T wy = static_cast<T>(t.wy), wx = static_cast<T>(t.wx);
            T gy = 0, gx = 0;
            for (int c = 0; c < C; ++c) {
              const T g = n.grad.at(c, i, j);
              if (dimg) {
                dimg->at(c, t.y0, t.x0) += g * (T(1) - wy) * (T(1) - wx);
                dimg->at(c, t.y0, t.x1) += g * (T(1) - wy) * wx;
                dimg->at(c, t.y1, t.x0) += g * wy * (T(1) - wx);
                dimg->at(c, t.y1, t.x1) += g * wy * wx;
              }
              if (dphi) {
                const T v00 = img.at(c, t.y0, t.x0), v01 = img.at(c, t.y0, t.x1);
                const T v10 = img.at(c, t.y1, t.x0), v11 = img.at(c, t.y1, t.x1);
                gy += g * ((T(1) - wx) * (v10 - v00) + wx * (v11 - v01));
                gx += g * ((T(1) - wy) * (v01 - v00) + wy * (v11 - v10));
              }
            }
            if (dphi) {
              if (t.y_free) dphi->at(0, i, j) += gy;
              if (t.x_free) dphi->at(1, i, j) += gx;
            }
          }
      });
}

template <typename T>
void require_normalized(const Grid<T>& label, double tol, const char* op) {
  require_rank(label.shape(), 3, op);
  const std::size_t P = label.plane();
  const int C = label.channels();
  for (std::size_t p = 0; p < P; ++p) {
    double s = 0;
    for (int c = 0; c < C; ++c) s += label[c * P + p];
    if (std::abs(s - 1.0) > tol)
      throw std::invalid_argument(std::string(op) + ": label channels sum to " + std::to_string(s) +
                                  " at pixel " + std::to_string(p) + ", expected 1");
  }
}

template <typename T>
Var<T> warp_label(const Var<T>& label, const DisplacementField<T>& field) {
  require_normalized(label.value(), 1e-4, "warp_label");
  const int C = label.shape()[0];
  Var<T> warped = warp_image(label, field);
  return diff::div(warped, diff::broadcast_channels(diff::channel_sum(warped), C));
}

template <typename T>
Grid<T> harden(const Grid<T>& soft) {
  require_rank(soft.shape(), 3, "harden");
  const int C = soft.channels();
  const std::size_t P = soft.plane();
  Grid<T> out(soft.shape(), T(0));
  for (std::size_t p = 0; p < P; ++p) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (soft[c * P + p] > soft[best * P + p]) best = c;
    out[best * P + p] = T(1);
  }
  return out;
}

#define REGSEG_INSTANTIATE(T)                                                                 \
  template class DisplacementField<T>;                                                        \
  template DisplacementField<T> scale_field(const DisplacementField<T>&, double);             \
  template std::pair<DisplacementField<T>, PerturbationDraw> dss_sample(                      \
      const DisplacementField<T>&, Rng&);                                                     \
  template Var<T> warp_image(const Var<T>&, const DisplacementField<T>&);                    \
  template Var<T> warp_label(const Var<T>&, const DisplacementField<T>&);                    \
  template Grid<T> harden(const Grid<T>&);                                                    \
  template void require_normalized(const Grid<T>&, double, const char*);

REGSEG_INSTANTIATE(float)
REGSEG_INSTANTIATE(double)
#undef REGSEG_INSTANTIATE

}  // namespace regseg::warp
