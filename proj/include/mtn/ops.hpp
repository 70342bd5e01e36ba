#pragma once

#include "mtn/tensor.hpp"

namespace mtn {

template <typename S>
Tensor4<S> relu(const Tensor4<S>& x) {
  Tensor4<S> out = x;
  out.data = x.data.max(S(0));
  return out;
}

// Subgradient at 0 is 0 (strict comparison).
template <typename S>
Tensor4<S> relu_backward(const Tensor4<S>& input, const Tensor4<S>& grad_out) {
  require(input.same_shape(grad_out), "relu_backward: shape mismatch");
  Tensor4<S> out = grad_out;
  out.data = (input.data > S(0)).select(grad_out.data, S(0));
  return out;
}

template <typename S>
Tensor4<S> sigmoid(const Tensor4<S>& x) {
  Tensor4<S> out = x;
  out.data = S(1) / (S(1) + (-x.data).exp());
  return out;
}

/// Takes the forward *output* y, not the input.
template <typename S>
Tensor4<S> sigmoid_backward(const Tensor4<S>& output, const Tensor4<S>& grad_out) {
  require(output.same_shape(grad_out), "sigmoid_backward: shape mismatch");
  Tensor4<S> out = grad_out;
  out.data = grad_out.data * output.data * (S(1) - output.data);
  return out;
}

namespace detail {

struct BilinearTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;  // weight of hi; lo gets 1-frac
};

// Half-pixel-center (align-corners-false) source tap for one output index.
inline BilinearTap bilinear_tap(int out_idx, int in_extent, int out_extent) {
  const double scale = static_cast<double>(in_extent) / out_extent;
  const double src = (out_idx + 0.5) * scale - 0.5;
  const double floor_src = std::floor(src);
  BilinearTap t;
  t.frac = src - floor_src;
  const int lo = static_cast<int>(floor_src);
  t.lo = std::min(std::max(lo, 0), in_extent - 1);
  t.hi = std::min(std::max(lo + 1, 0), in_extent - 1);
  return t;
}

}  // namespace detail

/// Half-pixel-center bilinear resampling. Constant maps stay constant and
/// outputs never leave the input's [min, max] range.
template <typename S>
Tensor4<S> bilinear_resize(const Tensor4<S>& x, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: target size must be >= 1");
  if (out_h == x.height && out_w == x.width) return x;
  Tensor4<S> out(x.batch, x.channels, out_h, out_w);
  std::vector<detail::BilinearTap> xs(out_w), ys(out_h);
  for (int ox = 0; ox < out_w; ++ox) xs[ox] = detail::bilinear_tap(ox, x.width, out_w);
  for (int oy = 0; oy < out_h; ++oy) ys[oy] = detail::bilinear_tap(oy, x.height, out_h);
  for (int b = 0; b < x.batch; ++b) {
    for (int c = 0; c < x.channels; ++c) {
      const S* src = x.channel_ptr(b, c);
      S* dst = out.channel_ptr(b, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& ty = ys[oy];
        const S* r0 = src + static_cast<Eigen::Index>(ty.lo) * x.width;
        const S* r1 = src + static_cast<Eigen::Index>(ty.hi) * x.width;
        const S wy = static_cast<S>(ty.frac);
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& tx = xs[ox];
          const S wx = static_cast<S>(tx.frac);
          const S top = r0[tx.lo] * (S(1) - wx) + r0[tx.hi] * wx;
          const S bot = r1[tx.lo] * (S(1) - wx) + r1[tx.hi] * wx;
          dst[static_cast<Eigen::Index>(oy) * out_w + ox] = top * (S(1) - wy) + bot * wy;
        }
      }
    }
  }
  return out;
}

/// Adjoint of bilinear_resize (the op is linear in its input).
template <typename S>
Tensor4<S> bilinear_resize_backward(const Tensor4<S>& grad_out, int in_h, int in_w) {
  if (grad_out.height == in_h && grad_out.width == in_w) return grad_out;
  Tensor4<S> out(grad_out.batch, grad_out.channels, in_h, in_w);
  std::vector<detail::BilinearTap> xs(grad_out.width), ys(grad_out.height);
  for (int ox = 0; ox < grad_out.width; ++ox) xs[ox] = detail::bilinear_tap(ox, in_w, grad_out.width);
  for (int oy = 0; oy < grad_out.height; ++oy) ys[oy] = detail::bilinear_tap(oy, in_h, grad_out.height);
  for (int b = 0; b < grad_out.batch; ++b) {
    for (int c = 0; c < grad_out.channels; ++c) {
      const S* g = grad_out.channel_ptr(b, c);
      S* dst = out.channel_ptr(b, c);
      for (int oy = 0; oy < grad_out.height; ++oy) {
        const auto& ty = ys[oy];
        const S wy = static_cast<S>(ty.frac);
        for (int ox = 0; ox < grad_out.width; ++ox) {
          const auto& tx = xs[ox];
          const S wx = static_cast<S>(tx.frac);
          const S gv = g[static_cast<Eigen::Index>(oy) * grad_out.width + ox];
          dst[static_cast<Eigen::Index>(ty.lo) * in_w + tx.lo] += gv * (S(1) - wy) * (S(1) - wx);
          dst[static_cast<Eigen::Index>(ty.lo) * in_w + tx.hi] += gv * (S(1) - wy) * wx;
          dst[static_cast<Eigen::Index>(ty.hi) * in_w + tx.lo] += gv * wy * (S(1) - wx);
          dst[static_cast<Eigen::Index>(ty.hi) * in_w + tx.hi] += gv * wy * wx;
        }
      }
    }
  }
  return out;
}

template <typename S>
Tensor4<S> concat_channels(const Tensor4<S>& a, const Tensor4<S>& b) {
  require(a.batch == b.batch && a.height == b.height && a.width == b.width,
          "concat_channels: grid mismatch");
  Tensor4<S> out(a.batch, a.channels + b.channels, a.height, a.width);
  const Eigen::Index plane = static_cast<Eigen::Index>(a.height) * a.width;
  for (int n = 0; n < a.batch; ++n) {
    std::copy(a.channel_ptr(n, 0), a.channel_ptr(n, 0) + plane * a.channels,
              out.channel_ptr(n, 0));
    std::copy(b.channel_ptr(n, 0), b.channel_ptr(n, 0) + plane * b.channels,
              out.channel_ptr(n, a.channels));
  }
  return out;
}

template <typename S>
std::pair<Tensor4<S>, Tensor4<S>> split_channels(const Tensor4<S>& x, int first_channels) {
  require(first_channels >= 1 && first_channels < x.channels, "split_channels: bad split point");
  Tensor4<S> a(x.batch, first_channels, x.height, x.width);
  Tensor4<S> b(x.batch, x.channels - first_channels, x.height, x.width);
  const Eigen::Index plane = static_cast<Eigen::Index>(x.height) * x.width;
  for (int n = 0; n < x.batch; ++n) {
    std::copy(x.channel_ptr(n, 0), x.channel_ptr(n, 0) + plane * first_channels,
              a.channel_ptr(n, 0));
    std::copy(x.channel_ptr(n, first_channels),
              x.channel_ptr(n, first_channels) + plane * b.channels,
              b.channel_ptr(n, 0));
  }
  return {std::move(a), std::move(b)};
}

}  // namespace mtn
