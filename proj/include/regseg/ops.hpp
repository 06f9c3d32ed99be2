#pragma once

#include "regseg/tape.hpp"

namespace regseg::diff {

// Every function below records a node on the tape when any input requires a
// gradient. Shapes follow [C,H,W] unless stated otherwise.

/// Cross-correlation. input [Cin,H,W], weights [Cout,Cin,k,k], bias [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weights, const Var<T>& bias, int stride = 1,
              int padding = 0);

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
/// Natural log; throws std::domain_error on any non-positive entry.
template <typename T>
Var<T> log(const Var<T>& x);
template <typename T>
Var<T> square(const Var<T>& x);
/// max(x, floor); zero gradient where clamped.
template <typename T>
Var<T> clamp_min(const Var<T>& x, T floor);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);
template <typename T>
Var<T> add_scalar(const Var<T>& x, T offset);

/// Per-pixel softmax across channels, max-subtracted. Requires C >= 2.
template <typename T>
Var<T> softmax_channel(const Var<T>& x);

/// Full reductions to a [1] scalar.
template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);

template <typename T>
Var<T> resize_nearest_double(const Var<T>& x);
/// 2x2 average pooling; H and W must be even.
template <typename T>
Var<T> avg_pool2(const Var<T>& x);

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
/// [C,H,W] -> [1,H,W]
template <typename T>
Var<T> channel_sum(const Var<T>& x);
/// [1,H,W] -> [C,H,W]
template <typename T>
Var<T> broadcast_channels(const Var<T>& x, int channels);

/// Sum over a centered square window of odd side, zero padded, per channel.
template <typename T>
Var<T> box_sum(const Var<T>& x, int window);

/// Same value, no gradient path.
template <typename T>
Var<T> detach(const Var<T>& x);

}  // namespace regseg::diff
