#pragma once

#include "regseg/rng.hpp"
#include "regseg/tape.hpp"

namespace regseg::warp {

/// Per-pixel displacement in pixel units: channel 0 rows, channel 1 columns.
template <typename T>
class DisplacementField {
 public:
  /// Validates shape [2,H,W] and finiteness.
  explicit DisplacementField(diff::Var<T> data);
  static DisplacementField zeros(int height, int width);

  const diff::Var<T>& var() const noexcept { return data_; }
  const Grid<T>& value() const { return data_.value(); }
  int height() const { return data_.shape()[1]; }
  int width() const { return data_.shape()[2]; }

 private:
  diff::Var<T> data_;
};

struct PerturbationDraw {
  double alpha = 1.0;
};

/// Scales the whole field by one factor (differentiable w.r.t. the field).
template <typename T>
DisplacementField<T> scale_field(const DisplacementField<T>& field, double alpha);

/// Draws alpha ~ U[0,1] from `rng` and returns the scaled field.
template <typename T>
std::pair<DisplacementField<T>, PerturbationDraw> dss_sample(const DisplacementField<T>& field,
                                                             Rng& rng);

/// Bilinear resampling of every channel at p + field(p), coordinates clamped
/// to the image border. Differentiable w.r.t. image and field.
template <typename T>
diff::Var<T> warp_image(const diff::Var<T>& image, const DisplacementField<T>& field);

/// Warps each one-hot channel, then renormalizes per pixel to a soft label.
template <typename T>
diff::Var<T> warp_label(const diff::Var<T>& label, const DisplacementField<T>& field);

/// Per-pixel argmax as a one-hot grid (ties resolve to the lowest channel).
template <typename T>
Grid<T> harden(const Grid<T>& soft);

/// Rejects labels whose per-pixel channel sums deviate from 1 by more than tol.
template <typename T>
void require_normalized(const Grid<T>& label, double tol, const char* op);

}  // namespace regseg::warp
