#include "regseg/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace regseg::diff {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  int cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t patch() const { return static_cast<std::size_t>(cin) * k * k; }
  std::size_t pixels() const { return static_cast<std::size_t>(ho) * wo; }
  bool trivial() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t P = g.pixels();
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * P;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix < 0 || ix >= g.w) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
  const std::size_t P = g.pixels();
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * P;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.wo;
          T* dst = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

template <typename T, typename F>
Var<T> unary(const Var<T>& x, const char* op, F fwd,
             std::function<void(Node<T>&)> bw) {
  Grid<T> out(x.shape());
  const T* src = x.value().data();
  T* dst = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) dst[i] = fwd(src[i]);
  return make_result<T>(std::move(out), {x.node()}, op, std::move(bw));
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weights, const Var<T>& bias, int stride,
              int padding) {
  const Shape& xs = input.shape();
  const Shape& ws = weights.shape();
  require_rank(xs, 3, "conv2d input");
  require_rank(ws, 4, "conv2d weights");
  require_rank(bias.shape(), 1, "conv2d bias");
  const int k = ws[2];
  if (ws[3] != k || k % 2 == 0)
    throw ShapeError("conv2d: kernel must be square with odd side, got " + shape_str(ws));
  if (ws[1] != xs[0])
    throw ShapeError("conv2d: weights " + shape_str(ws) + " expect " + std::to_string(ws[1]) +
                     " input channels, input is " + shape_str(xs));
  if (bias.shape()[0] != ws[0])
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs weights " + shape_str(ws));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1, padding >= 0");
  const int span_h = xs[1] + 2 * padding - k;
  const int span_w = xs[2] + 2 * padding - k;
  if (span_h < 0 || span_w < 0 || span_h % stride || span_w % stride)
    throw ShapeError("conv2d: input " + shape_str(xs) + " with k=" + std::to_string(k) +
                     " stride=" + std::to_string(stride) + " padding=" + std::to_string(padding) +
                     " gives a non-integral output size");

  const ConvGeom g{xs[0], xs[1], xs[2], ws[0], k, stride, padding, span_h / stride + 1,
                   span_w / stride + 1};
  const std::size_t P = g.pixels();
  Grid<T> out(Shape{g.cout, g.ho, g.wo});

  AlignedVector<T> col;
  const T* colp = input.value().data();
  if (!g.trivial()) {
    col.resize(g.patch() * P);
    im2col(input.value().data(), g, col.data());
    colp = col.data();
  }
  Eigen::Map<const MatR<T>> W(weights.value().data(), g.cout, static_cast<Eigen::Index>(g.patch()));
  Eigen::Map<const MatR<T>> C(colp, static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(P));
  Eigen::Map<MatR<T>> O(out.data(), g.cout, static_cast<Eigen::Index>(P));
  O.noalias() = W * C;
  const T* b = bias.value().data();
  for (int co = 0; co < g.cout; ++co) O.row(co).array() += b[co];

  return make_result<T>(
      std::move(out), {input.node(), weights.node(), bias.node()}, "conv2d", [g](Node<T>& n) {
        const std::size_t P = g.pixels();
        auto& x = *n.inputs[0];
        auto& w = *n.inputs[1];
        auto& b = *n.inputs[2];
        Eigen::Map<const MatR<T>> G(n.grad.data(), g.cout, static_cast<Eigen::Index>(P));
        Eigen::Map<const MatR<T>> W(w.value.data(), g.cout, static_cast<Eigen::Index>(g.patch()));
        if (w.requires_grad) {
          AlignedVector<T> col;
          const T* colp = x.value.data();
          if (!g.trivial()) {
            col.resize(g.patch() * P);
            im2col(x.value.data(), g, col.data());
            colp = col.data();
          }
          Eigen::Map<const MatR<T>> C(colp, static_cast<Eigen::Index>(g.patch()),
                                      static_cast<Eigen::Index>(P));
          Eigen::Map<MatR<T>> dW(w.grad_buffer().data(), g.cout, static_cast<Eigen::Index>(g.patch()));
          dW.noalias() += G * C.transpose();
        }
        if (b.requires_grad) {
          T* db = b.grad_buffer().data();
          for (int co = 0; co < g.cout; ++co) db[co] += G.row(co).sum();
        }
        if (x.requires_grad) {
          if (g.trivial()) {
            Eigen::Map<MatR<T>> dX(x.grad_buffer().data(), g.cin, static_cast<Eigen::Index>(P));
            dX.noalias() += W.transpose() * G;
          } else {
            MatR<T> dcol = W.transpose() * G;
            col2im_add(dcol.data(), g, x.grad_buffer().data());
          }
        }
      });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return unary<T>(
      x, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](Node<T>& n) {
        auto& in = *n.inputs[0];
        T* d = in.grad_buffer().data();
        const T* v = in.value.data();
        const T* g = n.grad.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += v[i] > T(0) ? g[i] : slope * g[i];
      });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary<T>(
      x, "sigmoid",
      [](T v) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
      },
      [](Node<T>& n) {
        auto& in = *n.inputs[0];
        T* d = in.grad_buffer().data();
        const T* y = n.value.data();
        const T* g = n.grad.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += g[i] * y[i] * (T(1) - y[i]);
      });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  for (std::size_t i = 0; i < x.value().size(); ++i)
    if (!(x.value()[i] > T(0)))
      throw std::domain_error("log: non-positive input " + std::to_string(x.value()[i]) +
                              " at index " + std::to_string(i));
  return unary<T>(
      x, "log", [](T v) { return std::log(v); },
      [](Node<T>& n) {
        auto& in = *n.inputs[0];
        T* d = in.grad_buffer().data();
        const T* v = in.value.data();
        const T* g = n.grad.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += g[i] / v[i];
      });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary<T>(
      x, "square", [](T v) { return v * v; },
      [](Node<T>& n) {
        auto& in = *n.inputs[0];
        T* d = in.grad_buffer().data();
        const T* v = in.value.data();
        const T* g = n.grad.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += T(2) * v[i] * g[i];
      });
}

template <typename T>
Var<T> clamp_min(const Var<T>& x, T floor) {
  return unary<T>(
      x, "clamp_min", [floor](T v) { return v < floor ? floor : v; },
      [floor](Node<T>& n) {
        auto& in = *n.inputs[0];
        T* d = in.grad_buffer().data();
        const T* v = in.value.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          if (!(v[i] < floor)) d[i] += n.grad[i];
      });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  return unary<T>(
      x, "scale", [factor](T v) { return factor * v; },
      [factor](Node<T>& n) {
        auto& in = *n.inputs[0];
        T* d = in.grad_buffer().data();
        const T* g = n.grad.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += factor * g[i];
      });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T offset) {
  return unary<T>(
      x, "add_scalar", [offset](T v) { return v + offset; },
      [](Node<T>& n) { n.inputs[0]->accumulate(n.grad); });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Grid<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a.node(), b.node()}, "add", [](Node<T>& n) {
    n.inputs[0]->accumulate(n.grad);
    n.inputs[1]->accumulate(n.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Grid<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(out), {a.node(), b.node()}, "sub", [](Node<T>& n) {
    n.inputs[0]->accumulate(n.grad);
    auto& rhs = *n.inputs[1];
    if (rhs.requires_grad) {
      T* d = rhs.grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Grid<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a.node(), b.node()}, "mul", [](Node<T>& n) {
    auto& l = *n.inputs[0];
    auto& r = *n.inputs[1];
    if (l.requires_grad) {
      T* d = l.grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i] * r.value[i];
    }
    if (r.requires_grad) {
      T* d = r.grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i] * l.value[i];
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "div");
  Grid<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b.value()[i] == T(0)) throw std::domain_error("div: zero divisor at index " + std::to_string(i));
    out[i] = a.value()[i] / b.value()[i];
  }
  return make_result<T>(std::move(out), {a.node(), b.node()}, "div", [](Node<T>& n) {
    auto& l = *n.inputs[0];
    auto& r = *n.inputs[1];
    if (l.requires_grad) {
      T* d = l.grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i] / r.value[i];
    }
    if (r.requires_grad) {
      T* d = r.grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] -= n.grad[i] * n.value[i] / r.value[i];
    }
  });
}

template <typename T>
Var<T> softmax_channel(const Var<T>& x) {
  require_rank(x.shape(), 3, "softmax_channel");
  const int C = x.shape()[0];
  if (C < 2) throw ShapeError("softmax_channel: need at least 2 channels, got " + shape_str(x.shape()));
  const std::size_t P = x.value().plane();
  Grid<T> out(x.shape());
  const T* in = x.value().data();
  T* o = out.data();
  for (std::size_t p = 0; p < P; ++p) {
    T m = in[p];
    for (int c = 1; c < C; ++c) m = std::max(m, in[c * P + p]);
    T s = 0;
    for (int c = 0; c < C; ++c) s += (o[c * P + p] = std::exp(in[c * P + p] - m));
    for (int c = 0; c < C; ++c) o[c * P + p] /= s;
  }
  return make_result<T>(std::move(out), {x.node()}, "softmax_channel", [C, P](Node<T>& n) {
    auto& in = *n.inputs[0];
    T* d = in.grad_buffer().data();
    const T* y = n.value.data();
    const T* g = n.grad.data();
    for (std::size_t p = 0; p < P; ++p) {
      T dot = 0;
      for (int c = 0; c < C; ++c) dot += g[c * P + p] * y[c * P + p];
      for (int c = 0; c < C; ++c) d[c * P + p] += y[c * P + p] * (g[c * P + p] - dot);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  if (x.value().empty()) throw ShapeError("sum: empty input");
  T s = 0;
  for (T v : x.value().values()) s += v;
  return make_result<T>(Grid<T>(Shape{1}, s), {x.node()}, "sum", [](Node<T>& n) {
    auto& in = *n.inputs[0];
    T* d = in.grad_buffer().data();
    const T g = n.grad[0];
    for (std::size_t i = 0; i < in.value.size(); ++i) d[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  if (x.value().empty()) throw ShapeError("mean: empty input");
  T s = 0;
  for (T v : x.value().values()) s += v;
  const T count = static_cast<T>(x.value().size());
  return make_result<T>(Grid<T>(Shape{1}, s / count), {x.node()}, "mean", [count](Node<T>& n) {
    auto& in = *n.inputs[0];
    T* d = in.grad_buffer().data();
    const T g = n.grad[0] / count;
    for (std::size_t i = 0; i < in.value.size(); ++i) d[i] += g;
  });
}

template <typename T>
Var<T> resize_nearest_double(const Var<T>& x) {
  require_rank(x.shape(), 3, "resize_nearest_double");
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  Grid<T> out(Shape{C, 2 * H, 2 * W});
  const auto& v = x.value();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx) out.at(c, y, xx) = v.at(c, y / 2, xx / 2);
  return make_result<T>(std::move(out), {x.node()}, "resize_nearest_double", [C, H, W](Node<T>& n) {
    auto& d = n.inputs[0]->grad_buffer();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx) d.at(c, y / 2, xx / 2) += n.grad.at(c, y, xx);
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  require_rank(x.shape(), 3, "avg_pool2");
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (H % 2 || W % 2) throw ShapeError("avg_pool2: odd spatial size " + shape_str(x.shape()));
  Grid<T> out(Shape{C, H / 2, W / 2});
  const auto& v = x.value();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H / 2; ++y)
      for (int xx = 0; xx < W / 2; ++xx)
        out.at(c, y, xx) = (v.at(c, 2 * y, 2 * xx) + v.at(c, 2 * y, 2 * xx + 1) +
                            v.at(c, 2 * y + 1, 2 * xx) + v.at(c, 2 * y + 1, 2 * xx + 1)) /
                           T(4);
  return make_result<T>(std::move(out), {x.node()}, "avg_pool2", [C, H, W](Node<T>& n) {
    auto& d = n.inputs[0]->grad_buffer();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) d.at(c, y, xx) += n.grad.at(c, y / 2, xx / 2) / T(4);
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 3, "concat_channels");
  require_rank(b.shape(), 3, "concat_channels");
  if (a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2])
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::size_t na = a.value().size();
  Grid<T> out(Shape{a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]});
  std::copy(a.value().data(), a.value().data() + na, out.data());
  std::copy(b.value().data(), b.value().data() + b.value().size(), out.data() + na);
  return make_result<T>(std::move(out), {a.node(), b.node()}, "concat_channels", [na](Node<T>& n) {
    auto& l = *n.inputs[0];
    auto& r = *n.inputs[1];
    if (l.requires_grad) {
      T* d = l.grad_buffer().data();
      for (std::size_t i = 0; i < na; ++i) d[i] += n.grad[i];
    }
    if (r.requires_grad) {
      T* d = r.grad_buffer().data();
      for (std::size_t i = 0; i < r.value.size(); ++i) d[i] += n.grad[na + i];
    }
  });
}

template <typename T>
Var<T> channel_sum(const Var<T>& x) {
  require_rank(x.shape(), 3, "channel_sum");
  const int C = x.shape()[0];
  const std::size_t P = x.value().plane();
  Grid<T> out(Shape{1, x.shape()[1], x.shape()[2]});
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) out[p] += x.value()[c * P + p];
  return make_result<T>(std::move(out), {x.node()}, "channel_sum", [C, P](Node<T>& n) {
    T* d = n.inputs[0]->grad_buffer().data();
    for (int c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) d[c * P + p] += n.grad[p];
  });
}

template <typename T>
Var<T> broadcast_channels(const Var<T>& x, int channels) {
  require_rank(x.shape(), 3, "broadcast_channels");
  if (x.shape()[0] != 1) throw ShapeError("broadcast_channels: expects one channel, got " + shape_str(x.shape()));
  const std::size_t P = x.value().plane();
  Grid<T> out(Shape{channels, x.shape()[1], x.shape()[2]});
  for (int c = 0; c < channels; ++c)
    std::copy(x.value().data(), x.value().data() + P, out.data() + c * P);
  return make_result<T>(std::move(out), {x.node()}, "broadcast_channels", [channels, P](Node<T>& n) {
    T* d = n.inputs[0]->grad_buffer().data();
    for (int c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < P; ++p) d[p] += n.grad[c * P + p];
  });
}

namespace {

// Separable zero-padded window sum; self-adjoint, so the backward reuses it.
template <typename T>
void box_sum_into(const Grid<T>& in, int window, Grid<T>& out, bool accumulate) {
  const int C = in.channels(), H = in.height(), W = in.width(), r = window / 2;
  std::vector<T> tmp(static_cast<std::size_t>(H) * W);
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        T s = 0;
        for (int xx = std::max(0, x - r); xx <= std::min(W - 1, x + r); ++xx) s += in.at(c, y, xx);
        tmp[static_cast<std::size_t>(y) * W + x] = s;
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        T s = 0;
        for (int yy = std::max(0, y - r); yy <= std::min(H - 1, y + r); ++yy)
          s += tmp[static_cast<std::size_t>(yy) * W + x];
        if (accumulate)
          out.at(c, y, x) += s;
        else
          out.at(c, y, x) = s;
      }
  }
}

}  // namespace

template <typename T>
Var<T> box_sum(const Var<T>& x, int window) {
  require_rank(x.shape(), 3, "box_sum");
  if (window < 1 || window % 2 == 0)
    throw std::invalid_argument("box_sum: window must be odd and positive, got " + std::to_string(window));
  Grid<T> out(x.shape());
  box_sum_into(x.value(), window, out, false);
  return make_result<T>(std::move(out), {x.node()}, "box_sum", [window](Node<T>& n) {
    box_sum_into(n.grad, window, n.inputs[0]->grad_buffer(), true);
  });
}

template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>::constant(x.value());
}

#define REGSEG_INSTANTIATE(T)                                                 \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int); \
  template Var<T> leaky_relu(const Var<T>&, T);                               \
  template Var<T> sigmoid(const Var<T>&);                                     \
  template Var<T> log(const Var<T>&);                                         \
  template Var<T> square(const Var<T>&);                                      \
  template Var<T> clamp_min(const Var<T>&, T);                                \
  template Var<T> add(const Var<T>&, const Var<T>&);                          \
  template Var<T> sub(const Var<T>&, const Var<T>&);                          \
  template Var<T> mul(const Var<T>&, const Var<T>&);                          \
  template Var<T> div(const Var<T>&, const Var<T>&);                          \
  template Var<T> scale(const Var<T>&, T);                                    \
  template Var<T> add_scalar(const Var<T>&, T);                               \
  template Var<T> softmax_channel(const Var<T>&);                             \
  template Var<T> sum(const Var<T>&);                                         \
  template Var<T> mean(const Var<T>&);                                        \
  template Var<T> resize_nearest_double(const Var<T>&);                       \
  template Var<T> avg_pool2(const Var<T>&);                                   \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);              \
  template Var<T> channel_sum(const Var<T>&);                                 \
  template Var<T> broadcast_channels(const Var<T>&, int);                     \
  template Var<T> box_sum(const Var<T>&, int);                                \
  template Var<T> detach(const Var<T>&);

REGSEG_INSTANTIATE(float)
REGSEG_INSTANTIATE(double)
#undef REGSEG_INSTANTIATE

}  // namespace regseg::diff
