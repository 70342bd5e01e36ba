#pragma once

#include <Eigen/Core>

#include <random>
#include <stdexcept>

#include "mtn/tensor.hpp"

namespace mtn {

template <typename S>
using RowMatrixX =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Weights for one (possibly transposed) convolution. Weight layout is
/// (out_channels, in_channels, kh, kw) row-major; cross-correlation
/// semantics, zero padding. Padding is symmetric per axis.
template <typename S>
struct ConvParams {
  int out_channels = 0;
  int in_channels = 0;
  int kh = 0;
  int kw = 0;
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
  ArrayX<S> weights;
  ArrayX<S> bias;

  ConvParams() = default;

  ConvParams(int out_c, int in_c, int kh_, int kw_, int stride_, int pad)
      : ConvParams(out_c, in_c, kh_, kw_, stride_, pad, pad) {}

  ConvParams(int out_c, int in_c, int kh_, int kw_, int stride_, int pad_h_, int pad_w_)
      : out_channels(out_c),
        in_channels(in_c),
        kh(kh_),
        kw(kw_),
        stride(stride_),
        pad_h(pad_h_),
        pad_w(pad_w_) {
    weights = ArrayX<S>::Zero(static_cast<Eigen::Index>(out_c) * in_c * kh_ * kw_);
    bias = ArrayX<S>::Zero(out_c);
    validate(false);
  }

  Eigen::Index weight_count() const { return weights.size(); }
  Eigen::Index param_count() const { return weights.size() + bias.size(); }

  S& w(int co, int ci, int ky, int kx) {
    return weights[((static_cast<Eigen::Index>(co) * in_channels + ci) * kh + ky) * kw + kx];
  }
  S w(int co, int ci, int ky, int kx) const {
    return weights[((static_cast<Eigen::Index>(co) * in_channels + ci) * kh + ky) * kw + kx];
  }

  // Plain convolutions require odd kernels; exact x2 transposed
  // convolutions need even ones, so oddness is checked per use.
  void validate(bool require_odd) const {
    require(out_channels >= 1 && in_channels >= 1, "ConvParams: channel counts must be >= 1");
    require(kh >= 1 && kw >= 1, "ConvParams: kernel extents must be >= 1");
    require(stride >= 1, "ConvParams: stride must be >= 1");
    require(pad_h >= 0 && pad_w >= 0, "ConvParams: padding must be >= 0");
    require(weights.size() == static_cast<Eigen::Index>(out_channels) * in_channels * kh * kw,
            "ConvParams: weight length inconsistent with declared shape");
    require(bias.size() == out_channels, "ConvParams: bias length inconsistent with out_channels");
    if (require_odd) {
      require(kh % 2 == 1 && kw % 2 == 1, "ConvParams: conv2d kernels must be odd");
    }
  }

  /// He-normal initialization (fan-in scaled). The small positive bias
  /// keeps ReLU pre-activations off the exact-zero kink for regions of
  /// all-zero input (binary masks produce plenty of those).
  void init_he(std::mt19937& rng, double gain = 1.0, double bias_value = 0.01) {
    const double stddev = gain * std::sqrt(2.0 / (static_cast<double>(in_channels) * kh * kw));
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < weights.size(); ++i) weights[i] = static_cast<S>(dist(rng));
    bias.setConstant(static_cast<S>(bias_value));
  }

  template <typename T>
  ConvParams<T> cast() const {
    ConvParams<T> out;
    out.out_channels = out_channels;
    out.in_channels = in_channels;
    out.kh = kh;
    out.kw = kw;
    out.stride = stride;
    out.pad_h = pad_h;
    out.pad_w = pad_w;
    out.weights = weights.template cast<T>();
    out.bias = bias.template cast<T>();
    return out;
  }
};

template <typename S>
ConvParams<S> zeros_like(const ConvParams<S>& p) {
  return ConvParams<S>(p.out_channels, p.in_channels, p.kh, p.kw, p.stride, p.pad_h, p.pad_w);
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline int tconv_out_extent(int in, int k, int stride, int pad) {
  return (in - 1) * stride - 2 * pad + k;
}

namespace detail {

// Patch matrix: row (ci*kh+ky)*kw+kx, column oy*out_w+ox. Out-of-frame
// taps are zero (zero padding).
template <typename S>
void im2col(const S* src, int channels, int h, int w, int kh, int kw,
            int stride, int pad_h, int pad_w, RowMatrixX<S>& cols) {
  const int out_h = conv_out_extent(h, kh, stride, pad_h);
  const int out_w = conv_out_extent(w, kw, stride, pad_w);
  cols.setZero(static_cast<Eigen::Index>(channels) * kh * kw,
               static_cast<Eigen::Index>(out_h) * out_w);
  for (int ci = 0; ci < channels; ++ci) {
    const S* plane = src + static_cast<Eigen::Index>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(ci) * kh + ky) * kw + kx;
        S* dst = cols.data() + row * cols.cols();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad_h + ky;
          if (iy < 0 || iy >= h) continue;
          const S* src_row = plane + static_cast<Eigen::Index>(iy) * w;
          S* dst_row = dst + static_cast<Eigen::Index>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad_w + kx;
            if (ix < 0 || ix >= w) continue;
            dst_row[ox] = src_row[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds patch columns back onto the image grid.
template <typename S>
void col2im_add(const RowMatrixX<S>& cols, int channels, int h, int w, int kh,
                int kw, int stride, int pad_h, int pad_w, S* dst) {
  const int out_h = conv_out_extent(h, kh, stride, pad_h);
  const int out_w = conv_out_extent(w, kw, stride, pad_w);
  for (int ci = 0; ci < channels; ++ci) {
    S* plane = dst + static_cast<Eigen::Index>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(ci) * kh + ky) * kw + kx;
        const S* src = cols.data() + row * cols.cols();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad_h + ky;
          if (iy < 0 || iy >= h) continue;
          S* dst_row = plane + static_cast<Eigen::Index>(iy) * w;
          const S* src_row = src + static_cast<Eigen::Index>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad_w + kx;
            if (ix < 0 || ix >= w) continue;
            dst_row[ix] += src_row[ox];
          }
        }
      }
    }
  }
}

// Transposed-conv weight view: (in_c, out_c*kh*kw) copy of the
// (out_c, in_c, kh, kw) layout.
template <typename S>
RowMatrixX<S> tconv_weight_matrix(const ConvParams<S>& p) {
  const int k2 = p.kh * p.kw;
  RowMatrixX<S> w2(p.in_channels, static_cast<Eigen::Index>(p.out_channels) * k2);
  for (int co = 0; co < p.out_channels; ++co) {
    for (int ci = 0; ci < p.in_channels; ++ci) {
      for (int t = 0; t < k2; ++t) {
        w2(ci, static_cast<Eigen::Index>(co) * k2 + t) =
            p.weights[(static_cast<Eigen::Index>(co) * p.in_channels + ci) * k2 + t];
      }
    }
  }
  return w2;
}

}  // namespace detail

/// Cross-correlation (no kernel flip) with zero padding.
template <typename S>
Tensor4<S> conv2d(const Tensor4<S>& input, const ConvParams<S>& params) {
  params.validate(true);
  require(input.channels == params.in_channels, "conv2d: input channel count mismatch");
  const int out_h = conv_out_extent(input.height, params.kh, params.stride, params.pad_h);
  const int out_w = conv_out_extent(input.width, params.kw, params.stride, params.pad_w);
  require(out_h >= 1 && out_w >= 1, "conv2d: output would be empty");

  Tensor4<S> out(input.batch, params.out_channels, out_h, out_w);
  Eigen::Map<const RowMatrixX<S>> w_mat(
      params.weights.data(), params.out_channels,
      static_cast<Eigen::Index>(params.in_channels) * params.kh * params.kw);
  RowMatrixX<S> cols;
  for (int b = 0; b < input.batch; ++b) {
    detail::im2col(input.channel_ptr(b, 0), input.channels, input.height,
                   input.width, params.kh, params.kw, params.stride,
                   params.pad_h, params.pad_w, cols);
    Eigen::Map<RowMatrixX<S>> y(out.channel_ptr(b, 0), params.out_channels,
                                static_cast<Eigen::Index>(out_h) * out_w);
    y.noalias() = w_mat * cols;
    y.colwise() += params.bias.matrix();
  }
  return out;
}

template <typename S>
struct ConvBackward {
  Tensor4<S> grad_input;
  ConvParams<S> grad_params;  // weights/bias arrays hold the gradients
};

template <typename S>
ConvBackward<S> conv2d_backward(const Tensor4<S>& input, const ConvParams<S>& params,
                                const Tensor4<S>& grad_out) {
  params.validate(true);
  require(input.channels == params.in_channels, "conv2d_backward: input channel count mismatch");
  const int out_h = conv_out_extent(input.height, params.kh, params.stride, params.pad_h);
  const int out_w = conv_out_extent(input.width, params.kw, params.stride, params.pad_w);
  require(grad_out.batch == input.batch && grad_out.channels == params.out_channels &&
              grad_out.height == out_h && grad_out.width == out_w,
          "conv2d_backward: grad_out shape does not match conv2d output");

  ConvBackward<S> result{zeros_like(input), zeros_like(params)};
  Eigen::Map<const RowMatrixX<S>> w_mat(
      params.weights.data(), params.out_channels,
      static_cast<Eigen::Index>(params.in_channels) * params.kh * params.kw);
  Eigen::Map<RowMatrixX<S>> gw_mat(
      result.grad_params.weights.data(), params.out_channels,
      static_cast<Eigen::Index>(params.in_channels) * params.kh * params.kw);

  RowMatrixX<S> cols, gcols;
  for (int b = 0; b < input.batch; ++b) {
    Eigen::Map<const RowMatrixX<S>> gy(grad_out.channel_ptr(b, 0), params.out_channels,
                                       static_cast<Eigen::Index>(out_h) * out_w);
    detail::im2col(input.channel_ptr(b, 0), input.channels, input.height,
                   input.width, params.kh, params.kw, params.stride,
                   params.pad_h, params.pad_w, cols);
    gw_mat.noalias() += gy * cols.transpose();
    result.grad_params.bias.matrix() += gy.rowwise().sum();
    gcols.noalias() = w_mat.transpose() * gy;
    detail::col2im_add(gcols, input.channels, input.height, input.width,
                       params.kh, params.kw, params.stride, params.pad_h,
                       params.pad_w, result.grad_input.channel_ptr(b, 0));
  }
  return result;
}

/// Fractionally strided convolution: each input pixel scatters a kernel
/// patch; output extent is (in-1)*stride - 2*pad + k.
template <typename S>
Tensor4<S> transposed_conv2d(const Tensor4<S>& input, const ConvParams<S>& params) {
  params.validate(false);
  require(input.channels == params.in_channels, "transposed_conv2d: input channel count mismatch");
  const int out_h = tconv_out_extent(input.height, params.kh, params.stride, params.pad_h);
  const int out_w = tconv_out_extent(input.width, params.kw, params.stride, params.pad_w);
  require(out_h >= 1 && out_w >= 1, "transposed_conv2d: output would be empty");

  Tensor4<S> out(input.batch, params.out_channels, out_h, out_w);
  const RowMatrixX<S> w2 = detail::tconv_weight_matrix(params);
  RowMatrixX<S> cols;
  for (int b = 0; b < input.batch; ++b) {
    Eigen::Map<const RowMatrixX<S>> x(input.channel_ptr(b, 0), input.channels,
                                      static_cast<Eigen::Index>(input.height) * input.width);
    cols.noalias() = w2.transpose() * x;
    // col2im over the *output* grid: input positions play the role of
    // conv output positions under the same (k, stride, pad) geometry.
    detail::col2im_add(cols, params.out_channels, out_h, out_w, params.kh,
                       params.kw, params.stride, params.pad_h, params.pad_w,
                       out.channel_ptr(b, 0));
    for (int co = 0; co < params.out_channels; ++co) {
      Eigen::Map<ArrayX<S>> plane(out.channel_ptr(b, co),
                                  static_cast<Eigen::Index>(out_h) * out_w);
      plane += params.bias[co];
    }
  }
  return out;
}

template <typename S>
ConvBackward<S> transposed_conv2d_backward(const Tensor4<S>& input,
                                           const ConvParams<S>& params,
                                           const Tensor4<S>& grad_out) {
  params.validate(false);
  require(input.channels == params.in_channels,
          "transposed_conv2d_backward: input channel count mismatch");
  const int out_h = tconv_out_extent(input.height, params.kh, params.stride, params.pad_h);
  const int out_w = tconv_out_extent(input.width, params.kw, params.stride, params.pad_w);
  require(grad_out.batch == input.batch && grad_out.channels == params.out_channels &&
              grad_out.height == out_h && grad_out.width == out_w,
          "transposed_conv2d_backward: grad_out shape mismatch");

  ConvBackward<S> result{zeros_like(input), zeros_like(params)};
  const RowMatrixX<S> w2 = detail::tconv_weight_matrix(params);
  RowMatrixX<S> gw2 = RowMatrixX<S>::Zero(w2.rows(), w2.cols());
  RowMatrixX<S> gcols;
  const int k2 = params.kh * params.kw;

  for (int b = 0; b < input.batch; ++b) {
    detail::im2col(grad_out.channel_ptr(b, 0), params.out_channels, out_h,
                   out_w, params.kh, params.kw, params.stride, params.pad_h,
                   params.pad_w, gcols);
    Eigen::Map<const RowMatrixX<S>> x(input.channel_ptr(b, 0), input.channels,
                                      static_cast<Eigen::Index>(input.height) * input.width);
    Eigen::Map<RowMatrixX<S>> gx(result.grad_input.channel_ptr(b, 0), input.channels,
                                 static_cast<Eigen::Index>(input.height) * input.width);
    gx.noalias() += w2 * gcols;
    gw2.noalias() += x * gcols.transpose();
    for (int co = 0; co < params.out_channels; ++co) {
      Eigen::Map<const ArrayX<S>> plane(grad_out.channel_ptr(b, co),
                                        static_cast<Eigen::Index>(out_h) * out_w);
      result.grad_params.bias[co] += plane.sum();
    }
  }
  for (int co = 0; co < params.out_channels; ++co) {
    for (int ci = 0; ci < params.in_channels; ++ci) {
      for (int t = 0; t < k2; ++t) {
        result.grad_params.weights[(static_cast<Eigen::Index>(co) * params.in_channels + ci) * k2 + t] =
            gw2(ci, static_cast<Eigen::Index>(co) * k2 + t);
      }
    }
  }
  return result;
}

}  // namespace mtn
