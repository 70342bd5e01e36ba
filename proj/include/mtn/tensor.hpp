#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtn {

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

/// Batched channel-major dense grid. Layout is row-major over
/// (batch, channel, row, column); the carrier for images, feature maps
/// and gradients throughout the pipeline.
template <typename S>
struct Tensor4 {
  int batch = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  ArrayX<S> data;

  Tensor4() = default;

  Tensor4(int b, int c, int h, int w)
      : batch(b), channels(c), height(h), width(w) {
    if (b < 1 || c < 1 || h < 1 || w < 1) {
      throw std::invalid_argument("Tensor4: all dimensions must be >= 1");
    }
    data = ArrayX<S>::Zero(static_cast<Eigen::Index>(b) * c * h * w);
  }

  static Tensor4 from_values(int b, int c, int h, int w,
                             const std::vector<S>& values) {
    Tensor4 t(b, c, h, w);
    if (static_cast<Eigen::Index>(values.size()) != t.data.size()) {
      throw std::invalid_argument("Tensor4: value count does not match shape");
    }
    for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = values[i];
    return t;
  }

  Eigen::Index size() const { return data.size(); }
  int plane() const { return height * width; }

  S& operator()(int b, int c, int y, int x) {
    return data[((static_cast<Eigen::Index>(b) * channels + c) * height + y) *
                    width +
                x];
  }
  S operator()(int b, int c, int y, int x) const {
    return data[((static_cast<Eigen::Index>(b) * channels + c) * height + y) *
                    width +
                x];
  }

  S* channel_ptr(int b, int c) {
    return data.data() + (static_cast<Eigen::Index>(b) * channels + c) * plane();
  }
  const S* channel_ptr(int b, int c) const {
    return data.data() + (static_cast<Eigen::Index>(b) * channels + c) * plane();
  }

  bool same_shape(const Tensor4& o) const {
    return batch == o.batch && channels == o.channels && height == o.height &&
           width == o.width;
  }

  bool all_finite() const { return data.isFinite().all(); }

  template <typename T>
  Tensor4<T> cast() const {
    Tensor4<T> out;
    out.batch = batch;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.data = data.template cast<T>();
    return out;
  }
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

template <typename S>
Tensor4<S> zeros_like(const Tensor4<S>& t) {
  return Tensor4<S>(t.batch, t.channels, t.height, t.width);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Single-channel integer label map; 0 is background, values 1..M index
/// objects. The mask carrier for file I/O, fusion and metrics.
struct LabelImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  LabelImage() = default;
  LabelImage(int h, int w)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {
    if (h < 1 || w < 1) {
      throw std::invalid_argument("LabelImage: dimensions must be >= 1");
    }
  }

  std::uint8_t& at(int y, int x) {
    return labels[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t at(int y, int x) const {
    return labels[static_cast<std::size_t>(y) * width + x];
  }

  int max_label() const {
    int m = 0;
    for (auto v : labels) m = std::max(m, static_cast<int>(v));
    return m;
  }

  bool same_shape(const LabelImage& o) const {
    return height == o.height && width == o.width;
  }

  bool operator==(const LabelImage& o) const {
    return height == o.height && width == o.width && labels == o.labels;
  }
};

/// Binary view of one object label as a {0,1}-valued single-channel tensor.
template <typename S>
Tensor4<S> binary_mask_tensor(const LabelImage& img, int label) {
  Tensor4<S> t(1, 1, img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      t(0, 0, y, x) = img.at(y, x) == label ? S(1) : S(0);
    }
  }
  return t;
}

/// Thresholds a probability map at 0.5 into a {0,1} label image.
template <typename S>
LabelImage threshold_mask(const Tensor4<S>& prob, S threshold = S(0.5)) {
  require(prob.batch == 1 && prob.channels == 1,
          "threshold_mask: expected a single-channel map");
  LabelImage out(prob.height, prob.width);
  for (int y = 0; y < prob.height; ++y) {
    for (int x = 0; x < prob.width; ++x) {
      out.at(y, x) = prob(0, 0, y, x) > threshold ? 1 : 0;
    }
  }
  return out;
}

}  // namespace mtn
