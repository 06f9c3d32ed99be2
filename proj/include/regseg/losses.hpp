#pragma once

#include "regseg/tape.hpp"
#include "regseg/warp.hpp"

namespace regseg::loss {

using diff::Var;

/// Added inside every log.
inline constexpr double kLogEps = 1e-7;
/// Added to the local CC denominator.
inline constexpr double kCcEps = 1e-5;

struct LossWeights {
  double adv = 1.0;
  double drc = 10.0;
  double cc = 1.0;
  double smooth = 1.0;  // lambda_R
  double acm = 1.0;
  double ce = 1.0;

  /// Throws std::invalid_argument unless every weight is finite and >= 0.
  void validate() const;
};

/// Negative mean squared local correlation of two single-channel images.
/// Window statistics are taken over the in-image pixels of each window.
template <typename T>
Var<T> local_cc(const Var<T>& warped, const Var<T>& fixed, int window = 9);

/// Mean of squared forward differences of both field channels along rows and columns.
template <typename T>
Var<T> smoothness(const warp::DisplacementField<T>& field);

/// beta * moving + (1 - beta) * fixed
template <typename T>
Var<T> fuse_reference(const Var<T>& moving, const Var<T>& fixed, double beta);

/// mean[-log(d_ref + eps) - log(1 - d_warp + eps)]
template <typename T>
Var<T> disc_loss(const Var<T>& d_ref, const Var<T>& d_warp);

/// mean[-log(d_warp + eps)]
template <typename T>
Var<T> adv_loss(const Var<T>& d_warp);

/// Pixel mean of -sum_c target_c log(pred_c + eps). Both inputs must be per-pixel normalized.
template <typename T>
Var<T> ce_loss(const Var<T>& pred, const Var<T>& target);

/// Confidence-weighted cross entropy between warped labels and the fixed-image
/// prediction. The confidence map is detached.
template <typename T>
Var<T> acm_loss(const Var<T>& confidence, const Var<T>& warped_label, const Var<T>& seg_fixed);

/// Mean over channels and pixels of (seg_warped - seg_fixed)^2.
template <typename T>
Var<T> drc_loss(const Var<T>& seg_warped, const Var<T>& seg_fixed);

template <typename T>
struct RegParts {
  Var<T> adv, drc, cc, smooth;
};

template <typename T>
struct SegParts {
  Var<T> acm, ce;
};

template <typename T>
Var<T> reg_total(const RegParts<T>& parts, const LossWeights& w);

template <typename T>
Var<T> seg_total(const SegParts<T>& parts, const LossWeights& w);

/// Scalar zero usable as an absent component.
template <typename T>
Var<T> zero_scalar();

}  // namespace regseg::loss
