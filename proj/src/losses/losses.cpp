#include "regseg/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "regseg/ops.hpp"

namespace regseg::loss {

using diff::Node;

void LossWeights::validate() const {
  const std::pair<const char*, double> all[] = {{"adv", adv}, {"drc", drc},       {"cc", cc},
                                                {"smooth", smooth}, {"acm", acm}, {"ce", ce}};
  for (const auto& [name, v] : all)
    if (!std::isfinite(v) || v < 0)
      throw std::invalid_argument(std::string("loss weight '") + name + "' must be finite and >= 0");
}

template <typename T>
Var<T> zero_scalar() {
  return Var<T>::constant(Grid<T>(Shape{1}, T(0)));
}

template <typename T>
Var<T> local_cc(const Var<T>& warped, const Var<T>& fixed, int window) {
  if (window < 1 || window % 2 == 0)
    throw std::invalid_argument("local_cc: window must be odd, got " + std::to_string(window));
  require_same_shape(warped.shape(), fixed.shape(), "local_cc");
  require_rank(warped.shape(), 3, "local_cc");
  if (warped.shape()[0] != 1) throw ShapeError("local_cc: expects single-channel images");

  // In-window pixel counts are data independent.
  Grid<T> ones(warped.shape(), T(1));
  const Var<T> count = diff::box_sum(Var<T>::constant(ones), window);

  const Var<T>& a = warped;
  const Var<T>& b = fixed;
  const Var<T> sa = diff::box_sum(a, window);
  const Var<T> sb = diff::box_sum(b, window);
  const Var<T> saa = diff::box_sum(diff::square(a), window);
  const Var<T> sbb = diff::box_sum(diff::square(b), window);
  const Var<T> sab = diff::box_sum(diff::mul(a, b), window);

  const Var<T> cross = diff::sub(sab, diff::div(diff::mul(sa, sb), count));
  // Cancellation can leave a flat window's variance slightly negative.
  const Var<T> var_a = diff::clamp_min(diff::sub(saa, diff::div(diff::square(sa), count)), T(0));
  const Var<T> var_b = diff::clamp_min(diff::sub(sbb, diff::div(diff::square(sb), count)), T(0));
  const Var<T> cc = diff::div(diff::square(cross),
                              diff::add_scalar(diff::mul(var_a, var_b), static_cast<T>(kCcEps)));
  return diff::scale(diff::mean(cc), T(-1));
}

template <typename T>
Var<T> smoothness(const warp::DisplacementField<T>& field) {
  const Grid<T>& f = field.value();
  const int H = f.height(), W = f.width();
  const double count = 2.0 * (static_cast<double>(H - 1) * W + static_cast<double>(H) * (W - 1));
  if (count <= 0) throw ShapeError("smoothness: field too small " + shape_str(f.shape()));
  double acc = 0;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        if (i + 1 < H) {
          const double d = static_cast<double>(f.at(c, i + 1, j)) - f.at(c, i, j);
          acc += d * d;
        }
        if (j + 1 < W) {
          const double d = static_cast<double>(f.at(c, i, j + 1)) - f.at(c, i, j);
          acc += d * d;
        }
      }
  Grid<T> out(Shape{1}, static_cast<T>(acc / count));
  return diff::make_result<T>(std::move(out), {field.var().node()}, "smoothness",
                              [H, W, count](Node<T>& n) {
                                const Grid<T>& f = n.inputs[0]->value;
                                Grid<T>& d = n.inputs[0]->grad_buffer();
                                const T s = static_cast<T>(2.0 / count) * n.grad[0];
                                for (int c = 0; c < 2; ++c)
                                  for (int i = 0; i < H; ++i)
                                    for (int j = 0; j < W; ++j) {
                                      if (i + 1 < H) {
                                        const T diffv = f.at(c, i + 1, j) - f.at(c, i, j);
                                        d.at(c, i + 1, j) += s * diffv;
                                        d.at(c, i, j) -= s * diffv;
                                      }
                                      if (j + 1 < W) {
                                        const T diffv = f.at(c, i, j + 1) - f.at(c, i, j);
                                        d.at(c, i, j + 1) += s * diffv;
                                        d.at(c, i, j) -= s * diffv;
                                      }
                                    }
                              });
}

template <typename T>
Var<T> fuse_reference(const Var<T>& moving, const Var<T>& fixed, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0))
    throw std::invalid_argument("fuse_reference: beta must lie in [0,1], got " + std::to_string(beta));
  require_same_shape(moving.shape(), fixed.shape(), "fuse_reference");
  return diff::add(diff::scale(moving, static_cast<T>(beta)),
                   diff::scale(fixed, static_cast<T>(1.0 - beta)));
}

namespace {

template <typename T>
Var<T> neg_log_eps(const Var<T>& x) {
  return diff::scale(diff::log(diff::add_scalar(x, static_cast<T>(kLogEps))), T(-1));
}

// -sum_c target_c log(pred_c + eps) per pixel, as [1,H,W].
template <typename T>
Var<T> pixel_ce(const Var<T>& pred, const Var<T>& target) {
  return diff::scale(
      diff::channel_sum(diff::mul(target, diff::log(diff::add_scalar(pred, static_cast<T>(kLogEps))))),
      T(-1));
}

}  // namespace

template <typename T>
Var<T> disc_loss(const Var<T>& d_ref, const Var<T>& d_warp) {
  require_same_shape(d_ref.shape(), d_warp.shape(), "disc_loss");
  const Var<T> one_minus = diff::add_scalar(diff::scale(d_warp, T(-1)), T(1));
  return diff::mean(diff::add(neg_log_eps(d_ref), neg_log_eps(one_minus)));
}

template <typename T>
Var<T> adv_loss(const Var<T>& d_warp) {
  return diff::mean(neg_log_eps(d_warp));
}

template <typename T>
Var<T> ce_loss(const Var<T>& pred, const Var<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "ce_loss");
  warp::require_normalized(pred.value(), 1e-4, "ce_loss prediction");
  warp::require_normalized(target.value(), 1e-4, "ce_loss target");
  return diff::mean(pixel_ce(pred, target));
}

template <typename T>
Var<T> acm_loss(const Var<T>& confidence, const Var<T>& warped_label, const Var<T>& seg_fixed) {
  require_same_shape(warped_label.shape(), seg_fixed.shape(), "acm_loss");
  require_rank(confidence.shape(), 3, "acm_loss confidence");
  if (confidence.shape()[0] != 1 || confidence.shape()[1] != seg_fixed.shape()[1] ||
      confidence.shape()[2] != seg_fixed.shape()[2])
    throw ShapeError("acm_loss: confidence map " + shape_str(confidence.shape()) +
                     " does not match prediction " + shape_str(seg_fixed.shape()));
  return diff::mean(diff::mul(diff::detach(confidence), pixel_ce(seg_fixed, warped_label)));
}

template <typename T>
Var<T> drc_loss(const Var<T>& seg_warped, const Var<T>& seg_fixed) {
  require_rank(seg_warped.shape(), 3, "drc_loss");
  if (seg_warped.shape()[0] != seg_fixed.shape()[0])
    throw ShapeError("drc_loss: channel count mismatch " + shape_str(seg_warped.shape()) + " vs " +
                     shape_str(seg_fixed.shape()));
  require_same_shape(seg_warped.shape(), seg_fixed.shape(), "drc_loss");
  return diff::mean(diff::square(diff::sub(seg_warped, seg_fixed)));
}

template <typename T>
Var<T> reg_total(const RegParts<T>& p, const LossWeights& w) {
  w.validate();
  Var<T> total = diff::scale(p.adv, static_cast<T>(w.adv));
  total = diff::add(total, diff::scale(p.drc, static_cast<T>(w.drc)));
  total = diff::add(total, diff::scale(p.cc, static_cast<T>(w.cc)));
  return diff::add(total, diff::scale(p.smooth, static_cast<T>(w.smooth)));
}

template <typename T>
Var<T> seg_total(const SegParts<T>& p, const LossWeights& w) {
  w.validate();
  return diff::add(diff::scale(p.acm, static_cast<T>(w.acm)), diff::scale(p.ce, static_cast<T>(w.ce)));
}

#define REGSEG_INSTANTIATE(T)                                                  \
  template Var<T> zero_scalar<T>();                                            \
  template Var<T> local_cc(const Var<T>&, const Var<T>&, int);                 \
  template Var<T> smoothness(const warp::DisplacementField<T>&);               \
  template Var<T> fuse_reference(const Var<T>&, const Var<T>&, double);        \
  template Var<T> disc_loss(const Var<T>&, const Var<T>&);                     \
  template Var<T> adv_loss(const Var<T>&);                                     \
  template Var<T> ce_loss(const Var<T>&, const Var<T>&);                       \
  template Var<T> acm_loss(const Var<T>&, const Var<T>&, const Var<T>&);       \
  template Var<T> drc_loss(const Var<T>&, const Var<T>&);                      \
  template Var<T> reg_total(const RegParts<T>&, const LossWeights&);           \
  template Var<T> seg_total(const SegParts<T>&, const LossWeights&);

REGSEG_INSTANTIATE(float)
REGSEG_INSTANTIATE(double)
#undef REGSEG_INSTANTIATE

}  // namespace regseg::loss
