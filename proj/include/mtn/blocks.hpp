#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtn/conv.hpp"
#include "mtn/ops.hpp"

namespace mtn {

/// Image-encoder layout: per-stage output channels and strides plus the
/// shared square kernel extent. The product of strides is the total
/// downscale factor S of the matching grid.
struct EncoderSpec {
  std::vector<int> channels;
  std::vector<int> strides;
  int kernel = 3;

  int total_stride() const {
    int s = 1;
    for (int v : strides) s *= v;
    return s;
  }

  void validate() const {
    require(!channels.empty() && channels.size() == strides.size(),
            "EncoderSpec: channel/stride lists must be non-empty and equal length");
    require(kernel >= 1 && kernel % 2 == 1, "EncoderSpec: kernel must be odd");
    for (int s : strides) require(s == 1 || s == 2, "EncoderSpec: stage strides must be 1 or 2");
    const int s = total_stride();
    require(s == 16 || s == 32, "EncoderSpec: total stride must be 16 or 32");
  }

  static EncoderSpec desk_default(int total_stride) {
    EncoderSpec spec;
    if (total_stride == 16) {
      spec.channels = {16, 32, 64, 64};
      spec.strides = {2, 2, 2, 2};
    } else if (total_stride == 32) {
      spec.channels = {16, 32, 64, 64, 64};
      spec.strides = {2, 2, 2, 2, 2};
    } else {
      throw std::invalid_argument("EncoderSpec: total stride must be 16 or 32");
    }
    return spec;
  }
};

struct ModelConfig {
  int total_stride = 16;   // S: matching-grid downscale factor
  int embed_channels = 32; // E
  int mask_channels = 64;  // C_m
  int decoder_width = 64;  // internal decoder channels == score map channels
  int gcn_kernel = 7;      // extent k of the paired kx1 / 1xk convolutions
  // Fixed gain between the logit convolution and the squash. The head is
  // initialized 1/logit_scale smaller, so initial probabilities stay near
  // 0.5 while every optimizer step moves the logits logit_scale times
  // further; keeps the head trainable at very small learning rates.
  double logit_scale = 8.0;
  bool freeze_encoder = false;

  void validate() const {
    require(total_stride == 16 || total_stride == 32, "ModelConfig: total_stride must be 16 or 32");
    require(embed_channels >= 1, "ModelConfig: embed_channels must be >= 1");
    require(mask_channels >= 1, "ModelConfig: mask_channels must be >= 1");
    require(decoder_width >= 1, "ModelConfig: decoder_width must be >= 1");
    require(gcn_kernel >= 1 && gcn_kernel % 2 == 1, "ModelConfig: gcn_kernel must be odd");
    require(logit_scale > 0, "ModelConfig: logit_scale must be > 0");
  }
};

/// A plain sequence of convolutions with optional ReLU after each.
template <typename S>
struct ConvStack {
  std::vector<ConvParams<S>> layers;
  std::vector<char> relu_after;

  int total_stride() const {
    int s = 1;
    for (const auto& l : layers) s *= l.stride;
    return s;
  }
};

template <typename S>
struct StackTrace {
  std::vector<Tensor4<S>> inputs;   // input of each conv
  std::vector<Tensor4<S>> pre_act;  // conv output before the activation
};

template <typename S>
Tensor4<S> run_stack(const ConvStack<S>& stack, const Tensor4<S>& input,
                     StackTrace<S>* trace = nullptr) {
  Tensor4<S> x = input;
  if (trace) {
    trace->inputs.clear();
    trace->pre_act.clear();
  }
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    if (trace) trace->inputs.push_back(x);
    Tensor4<S> pre = conv2d(x, stack.layers[i]);
    if (trace) trace->pre_act.push_back(pre);
    x = stack.relu_after[i] ? relu(pre) : std::move(pre);
  }
  return x;
}

/// Accumulates layer gradients into `grads` (same stack shape) and
/// returns the gradient with respect to the stack input.
template <typename S>
Tensor4<S> stack_backward(const ConvStack<S>& stack, const StackTrace<S>& trace,
                          const Tensor4<S>& grad_out, ConvStack<S>& grads) {
  require(grads.layers.size() == stack.layers.size(), "stack_backward: gradient stack mismatch");
  Tensor4<S> g = grad_out;
  for (std::size_t i = stack.layers.size(); i-- > 0;) {
    if (stack.relu_after[i]) g = relu_backward(trace.pre_act[i], g);
    ConvBackward<S> back = conv2d_backward(trace.inputs[i], stack.layers[i], g);
    grads.layers[i].weights += back.grad_params.weights;
    grads.layers[i].bias += back.grad_params.bias;
    g = std::move(back.grad_input);
  }
  return g;
}

template <typename S>
struct DecoderParams {
  // Global convolutional block: two branches of paired kx1 / 1xk convs.
  ConvParams<S> gcn_row_a, gcn_col_a, gcn_col_b, gcn_row_b;
  struct Stage {
    ConvParams<S> up;   // x2 transposed convolution
    ConvParams<S> br1;  // boundary refinement: x + conv(relu(conv(x)))
    ConvParams<S> br2;
  };
  std::vector<Stage> stages;
  std::vector<ConvParams<S>> refine;  // stride-1 refinement convs at 1/4 scale
  ConvParams<S> out_conv;             // score map -> single logit channel
};

/// All trainable blocks. The image encoder is shared between the
/// reference and target branches (one parameter set, Siamese use).
template <typename S>
struct ModelParameters {
  ModelConfig config;
  EncoderSpec encoder_spec;
  ConvStack<S> encoder;
  ConvStack<S> embedding;
  ConvStack<S> mask_encoder;
  DecoderParams<S> decoder;

  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    for (std::size_t i = 0; i < self.encoder.layers.size(); ++i) {
      fn("encoder." + std::to_string(i), self.encoder.layers[i]);
    }
    for (std::size_t i = 0; i < self.embedding.layers.size(); ++i) {
      fn("embedding." + std::to_string(i), self.embedding.layers[i]);
    }
    for (std::size_t i = 0; i < self.mask_encoder.layers.size(); ++i) {
      fn("mask_encoder." + std::to_string(i), self.mask_encoder.layers[i]);
    }
    fn("decoder.gcn_row_a", self.decoder.gcn_row_a);
    fn("decoder.gcn_col_a", self.decoder.gcn_col_a);
    fn("decoder.gcn_col_b", self.decoder.gcn_col_b);
    fn("decoder.gcn_row_b", self.decoder.gcn_row_b);
    for (std::size_t i = 0; i < self.decoder.stages.size(); ++i) {
      const std::string base = "decoder.stage" + std::to_string(i);
      fn(base + ".up", self.decoder.stages[i].up);
      fn(base + ".br1", self.decoder.stages[i].br1);
      fn(base + ".br2", self.decoder.stages[i].br2);
    }
    for (std::size_t i = 0; i < self.decoder.refine.size(); ++i) {
      fn("decoder.refine" + std::to_string(i), self.decoder.refine[i]);
    }
    fn("decoder.out", self.decoder.out_conv);
  }

  template <typename Fn>
  void for_each_layer(Fn&& fn) {
    visit(*this, std::forward<Fn>(fn));
  }
  template <typename Fn>
  void for_each_layer(Fn&& fn) const {
    visit(*this, std::forward<Fn>(fn));
  }

  Eigen::Index param_count() const {
    Eigen::Index n = 0;
    for_each_layer([&](const std::string&, const ConvParams<S>& p) { n += p.param_count(); });
    return n;
  }

  /// Mask-encoder grid must coincide with the embedding grid.
  void validate() const {
    config.validate();
    encoder_spec.validate();
    require(encoder_spec.total_stride() == config.total_stride,
            "ModelParameters: encoder spec stride does not match config");
    require(encoder.total_stride() == config.total_stride,
            "ModelParameters: encoder stride does not match config");
    require(mask_encoder.total_stride() == config.total_stride,
            "ModelParameters: mask encoder grid does not coincide with embedding grid");
    require(static_cast<int>(mask_encoder.layers.size()) == 5,
            "ModelParameters: mask encoder must have 5 layers");
    require(embedding.layers.empty() ||
                embedding.layers.back().out_channels == config.embed_channels,
            "ModelParameters: embedding output channels mismatch");
    require(mask_encoder.layers.back().out_channels == config.mask_channels,
            "ModelParameters: mask encoder output channels mismatch");
  }

  template <typename T>
  ModelParameters<T> cast() const {
    ModelParameters<T> out;
    out.config = config;
    out.encoder_spec = encoder_spec;
    auto cast_stack = [](const ConvStack<S>& in) {
      ConvStack<T> s;
      s.relu_after = in.relu_after;
      for (const auto& l : in.layers) s.layers.push_back(l.template cast<T>());
      return s;
    };
    out.encoder = cast_stack(encoder);
    out.embedding = cast_stack(embedding);
    out.mask_encoder = cast_stack(mask_encoder);
    out.decoder.gcn_row_a = decoder.gcn_row_a.template cast<T>();
    out.decoder.gcn_col_a = decoder.gcn_col_a.template cast<T>();
    out.decoder.gcn_col_b = decoder.gcn_col_b.template cast<T>();
    out.decoder.gcn_row_b = decoder.gcn_row_b.template cast<T>();
    for (const auto& st : decoder.stages) {
      out.decoder.stages.push_back({st.up.template cast<T>(), st.br1.template cast<T>(),
                                    st.br2.template cast<T>()});
    }
    for (const auto& r : decoder.refine) out.decoder.refine.push_back(r.template cast<T>());
    out.decoder.out_conv = decoder.out_conv.template cast<T>();
    return out;
  }
};

namespace detail {

inline int log2_stride(int s) { return s == 16 ? 4 : 5; }

// Delta initialization: the center tap routes channel `ci = co + offset`
// through unchanged on top of a small-noise He carpet, so the layer
// starts as a near-identity (or channel-selecting) map.
template <typename S>
void init_delta(ConvParams<S>& p, std::mt19937& rng, double noise_gain,
                int src_offset = 0) {
  p.init_he(rng, noise_gain);
  const int cy = p.kh / 2, cx = p.kw / 2;
  for (int co = 0; co < p.out_channels; ++co) {
    const int ci = co + src_offset;
    if (ci >= 0 && ci < p.in_channels) p.w(co, ci, cy, cx) += S(1);
  }
}

// Bilinear-upsampling initialization for a 4x4 stride-2 transposed
// convolution (the classic FCN deconvolution start): each channel
// upsamples itself, plus a small-noise carpet.
template <typename S>
void init_bilinear_up(ConvParams<S>& p, std::mt19937& rng, double noise_gain) {
  p.init_he(rng, noise_gain);
  require(p.kh == 4 && p.kw == 4 && p.stride == 2,
          "init_bilinear_up: expects a 4x4 stride-2 kernel");
  const double taps[4] = {0.25, 0.75, 0.75, 0.25};
  for (int co = 0; co < p.out_channels; ++co) {
    if (co >= p.in_channels) break;
    for (int ky = 0; ky < 4; ++ky) {
      for (int kx = 0; kx < 4; ++kx) {
        p.w(co, co, ky, kx) += static_cast<S>(taps[ky] * taps[kx]);
      }
    }
  }
}

// Space-to-depth initialization of a 3x3 stride-2 convolution: the four
// taps of every input channel's 2x2 cell distribute evenly over the
// output channels (pure rearrangement when out = 4*in, cell averaging
// when narrower). A mask-encoder stack initialized this way hands the
// mask's sub-cell detail through the downscale instead of blurring it.
template <typename S>
void init_space_to_depth(ConvParams<S>& p, std::mt19937& rng, double noise_gain) {
  p.init_he(rng, noise_gain);
  require(p.kh == 3 && p.kw == 3 && p.stride == 2 && p.pad_h == 1 && p.pad_w == 1,
          "init_space_to_depth: expects a 3x3 stride-2 pad-1 kernel");
  const int slots = 4 * p.in_channels;
  std::vector<int> fan(static_cast<std::size_t>(p.out_channels), 0);
  for (int j = 0; j < slots; ++j) {
    fan[static_cast<std::size_t>(static_cast<long>(j) * p.out_channels / slots)]++;
  }
  for (int j = 0; j < slots; ++j) {
    const int ci = j / 4;
    const int tap = j % 4;  // taps (1,1) (1,2) (2,1) (2,2): the 2x2 cell
    const int co = static_cast<int>(static_cast<long>(j) * p.out_channels / slots);
    p.w(co, ci, 1 + tap / 2, 1 + tap % 2) += S(1) / static_cast<S>(fan[static_cast<std::size_t>(co)]);
  }
}

}  // namespace detail

/// Builds a freshly initialized model. The same seed always produces the
/// same parameters.
template <typename S>
ModelParameters<S> init_model(const ModelConfig& config, std::uint32_t seed,
                              double init_gain = 1.0) {
  config.validate();
  ModelParameters<S> m;
  m.config = config;
  m.encoder_spec = EncoderSpec::desk_default(config.total_stride);
  std::mt19937 rng(seed);
  const int k = m.encoder_spec.kernel;

  int in_c = 3;
  for (std::size_t i = 0; i < m.encoder_spec.channels.size(); ++i) {
    ConvParams<S> layer(m.encoder_spec.channels[i], in_c, k, k,
                        m.encoder_spec.strides[i], (k - 1) / 2);
    layer.init_he(rng, init_gain);
    in_c = layer.out_channels;
    m.encoder.layers.push_back(std::move(layer));
    m.encoder.relu_after.push_back(1);
  }

  // Two embedding convolutions; the second stays linear so embeddings
  // cover the full space for dot-product matching.
  {
    ConvParams<S> e0(config.embed_channels, in_c, 3, 3, 1, 1);
    ConvParams<S> e1(config.embed_channels, config.embed_channels, 3, 3, 1, 1);
    e0.init_he(rng, init_gain);
    e1.init_he(rng, init_gain);
    m.embedding.layers = {std::move(e0), std::move(e1)};
    m.embedding.relu_after = {1, 0};
  }

  // Five mask-encoder layers; log2(S) of them stride 2 so the mask grid
  // coincides with the embedding grid, the rest stride 1. The channel
  // ramp quadruples per downscale (capped at C_m) and the stride-2
  // layers start as space-to-depth rearrangements, so at initialization
  // the features already carry the mask's sub-cell boundary detail.
  {
    const int cm = config.mask_channels;
    const int stride2 = detail::log2_stride(config.total_stride);
    int prev = 1;
    for (int i = 0; i < 5; ++i) {
      const bool down = i < stride2;
      const int out = i == 4 ? cm : std::min(prev * 4, cm);
      ConvParams<S> layer(down ? out : cm, prev, 3, 3, down ? 2 : 1, 1);
      if (down) {
        detail::init_space_to_depth(layer, rng, init_gain * 0.25);
      } else {
        detail::init_delta(layer, rng, init_gain * 0.25);
      }
      if (i == 4) {
        // center the occupancy code: background < 0 < foreground, so a
        // zero vector left by a scatter hole reads as ambiguous rather
        // than as confident background
        layer.bias.setConstant(S(-0.5));
      }
      prev = layer.out_channels;
      m.mask_encoder.layers.push_back(std::move(layer));
      m.mask_encoder.relu_after.push_back(i + 1 < 5 ? 1 : 0);
    }
  }

  // Decoder: GCN block, log2(S)-2 upsampling stages with boundary
  // refinement, then stride-1 refinement convs for a total of five
  // parameterized upsampling/refinement layers, then the logit conv.
  // Initialized as a near-identity signal path (channel-selecting GCN
  // taps, bilinear upsamplers, delta refinements) so the warped mask
  // features reach the head intact before any training.
  {
    const int w = config.decoder_width;
    const int gk = config.gcn_kernel;
    const int cat_c = config.embed_channels + config.mask_channels;
    const double carpet = init_gain * 0.25;
    m.decoder.gcn_row_a = ConvParams<S>(w, cat_c, gk, 1, 1, (gk - 1) / 2, 0);
    m.decoder.gcn_col_a = ConvParams<S>(w, w, 1, gk, 1, 0, (gk - 1) / 2);
    m.decoder.gcn_col_b = ConvParams<S>(w, cat_c, 1, gk, 1, 0, (gk - 1) / 2);
    m.decoder.gcn_row_b = ConvParams<S>(w, w, gk, 1, 1, (gk - 1) / 2, 0);
    // branch A starts by routing the warped mask channels, branch B the
    // concatenated features in order (target first)
    detail::init_delta(m.decoder.gcn_row_a, rng, carpet, config.embed_channels);
    detail::init_delta(m.decoder.gcn_col_a, rng, carpet);
    detail::init_delta(m.decoder.gcn_col_b, rng, carpet);
    detail::init_delta(m.decoder.gcn_row_b, rng, carpet);

    const int n_stages = detail::log2_stride(config.total_stride) - 2;
    for (int i = 0; i < n_stages; ++i) {
      typename DecoderParams<S>::Stage st{ConvParams<S>(w, w, 4, 4, 2, 1),
                                          ConvParams<S>(w, w, 3, 3, 1, 1),
                                          ConvParams<S>(w, w, 3, 3, 1, 1)};
      detail::init_bilinear_up(st.up, rng, carpet);
      st.br1.init_he(rng, init_gain * 0.5);
      st.br2.init_he(rng, init_gain * 0.5);
      m.decoder.stages.push_back(std::move(st));
    }
    // the first refinement conv also reads the 1/4-scale target frame
    for (int i = 0; i < 5 - n_stages; ++i) {
      ConvParams<S> r(w, i == 0 ? w + 3 : w, 3, 3, 1, 1);
      detail::init_delta(r, rng, carpet);
      m.decoder.refine.push_back(std::move(r));
    }
    m.decoder.out_conv = ConvParams<S>(1, w, 3, 3, 1, 1);
    m.decoder.out_conv.init_he(rng, init_gain / config.logit_scale, 0.0);
  }

  m.validate();
  return m;
}

template <typename S>
ModelParameters<S> zeros_like(const ModelParameters<S>& p) {
  ModelParameters<S> out = p;
  out.for_each_layer([](const std::string&, ConvParams<S>& layer) {
    layer.weights.setZero();
    layer.bias.setZero();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Block forward passes

/// Shared-weight image encoder; both the reference and the target frame
/// go through this same parameter set. Inputs are RGB in [0,1]; each
/// channel is standardized per frame before the first convolution, which
/// cancels channelwise brightness/contrast differences between the
/// reference and target frames exactly. The frame itself is never a
/// training target, so the standardization needs no backward path.
template <typename S>
Tensor4<S> encode_image(const Tensor4<S>& frame, const ModelParameters<S>& model,
                        StackTrace<S>* trace = nullptr) {
  require(frame.channels == 3, "encode_image: expected an RGB frame");
  const int s = model.config.total_stride;
  require(frame.height % s == 0 && frame.width % s == 0,
          "encode_image: frame size must be divisible by the total stride");
  Tensor4<S> standardized = frame;
  const Eigen::Index plane = frame.plane();
  for (int b = 0; b < frame.batch; ++b) {
    for (int c = 0; c < frame.channels; ++c) {
      Eigen::Map<ArrayX<S>> chan(standardized.channel_ptr(b, c), plane);
      const S mean = chan.mean();
      const S var = (chan - mean).square().mean();
      chan = (chan - mean) / std::max(std::sqrt(var), S(1e-3));
    }
  }
  return run_stack(model.encoder, standardized, trace);
}

template <typename S>
struct EmbedTrace {
  StackTrace<S> stack;
  Tensor4<S> pre_norm;
  ArrayX<S> inv_norm;  // per-pixel 1/sqrt(|v|^2 + eps)
};

namespace detail {

constexpr double kEmbedNormEps = 1e-12;

}  // namespace detail

/// Compacts encoder features into the matching embedding space. The
/// output is L2-normalized per pixel so raw dot-product correlation
/// compares directions, not magnitudes; untrained magnitudes would
/// otherwise collapse every argmax onto the largest-norm target cell.
template <typename S>
Tensor4<S> embed(const Tensor4<S>& features, const ModelParameters<S>& model,
                 EmbedTrace<S>* trace = nullptr) {
  Tensor4<S> v = run_stack(model.embedding, features, trace ? &trace->stack : nullptr);
  const Eigen::Index plane = v.plane();
  ArrayX<S> inv_norm(plane * v.batch);
  Tensor4<S> out = v;
  for (int b = 0; b < v.batch; ++b) {
    for (Eigen::Index p = 0; p < plane; ++p) {
      S sum_sq = S(0);
      for (int c = 0; c < v.channels; ++c) {
        const S val = v.channel_ptr(b, c)[p];
        sum_sq += val * val;
      }
      const S s = S(1) / std::sqrt(sum_sq + static_cast<S>(detail::kEmbedNormEps));
      inv_norm[b * plane + p] = s;
      for (int c = 0; c < v.channels; ++c) {
        out.channel_ptr(b, c)[p] = v.channel_ptr(b, c)[p] * s;
      }
    }
  }
  if (trace) {
    trace->pre_norm = std::move(v);
    trace->inv_norm = std::move(inv_norm);
  }
  return out;
}

/// Backward through the per-pixel normalization and the embedding stack;
/// accumulates layer gradients and returns the input gradient.
template <typename S>
Tensor4<S> embed_backward(const ModelParameters<S>& model, const EmbedTrace<S>& trace,
                          const Tensor4<S>& grad_out, ConvStack<S>& grads) {
  const Tensor4<S>& v = trace.pre_norm;
  require(grad_out.same_shape(v), "embed_backward: gradient shape mismatch");
  Tensor4<S> grad_v = zeros_like(v);
  const Eigen::Index plane = v.plane();
  for (int b = 0; b < v.batch; ++b) {
    for (Eigen::Index p = 0; p < plane; ++p) {
      const S s = trace.inv_norm[b * plane + p];
      S dot = S(0);
      for (int c = 0; c < v.channels; ++c) {
        dot += v.channel_ptr(b, c)[p] * grad_out.channel_ptr(b, c)[p];
      }
      // d(v * s)/dv with s = (|v|^2 + eps)^(-1/2): s*I - s^3 * v v^T
      const S s3_dot = s * s * s * dot;
      for (int c = 0; c < v.channels; ++c) {
        grad_v.channel_ptr(b, c)[p] =
            s * grad_out.channel_ptr(b, c)[p] - s3_dot * v.channel_ptr(b, c)[p];
      }
    }
  }
  return stack_backward(model.embedding, trace.stack, grad_v, grads);
}

/// Encodes the full-resolution binary reference mask down to the
/// matching grid with C_m channels.
template <typename S>
Tensor4<S> encode_mask(const Tensor4<S>& mask, const ModelParameters<S>& model,
                       StackTrace<S>* trace = nullptr) {
  require(mask.channels == 1, "encode_mask: expected a single-channel mask");
  require(((mask.data == S(0)) || (mask.data == S(1))).all(),
          "encode_mask: mask must be binary {0,1}");
  const int s = model.config.total_stride;
  require(mask.height % s == 0 && mask.width % s == 0,
          "encode_mask: mask size must be divisible by the total stride");
  return run_stack(model.mask_encoder, mask, trace);
}

template <typename S>
struct DecodeTrace {
  Tensor4<S> cat;
  Tensor4<S> gcn_a1, gcn_b1;
  struct Stage {
    Tensor4<S> input;    // stage input x
    Tensor4<S> up;       // transposed-conv output (skip source)
    Tensor4<S> br1_pre;  // br1 output before relu
    Tensor4<S> br1_act;  // relu(br1_pre), input of br2
  };
  std::vector<Stage> stages;
  std::vector<Tensor4<S>> refine_inputs;
  std::vector<Tensor4<S>> refine_pre;
  Tensor4<S> score;      // 64-channel score map, input of out_conv
  Tensor4<S> prob_small; // sigmoid output at 1/4 scale
  int split_channels = 0;
};

/// Bottom-up decoder: concatenated target features and warped mask
/// features -> global convolutional block -> x2 upsampling stages with
/// residual boundary refinement -> refinement convs -> score map ->
/// logit conv -> logistic squash -> bilinear x4 to full resolution.
/// `fine_target` is the target frame brought to the decoder's 1/4
/// working scale (RGB in [0,1]); it joins before the refinement convs
/// and supplies the boundary detail the 1/S features cannot carry.
template <typename S>
Tensor4<S> decode(const Tensor4<S>& target_features, const Tensor4<S>& warped_mask_features,
                  const Tensor4<S>& fine_target, const ModelParameters<S>& model,
                  DecodeTrace<S>* trace = nullptr) {
  require(target_features.height == warped_mask_features.height &&
              target_features.width == warped_mask_features.width &&
              target_features.batch == warped_mask_features.batch,
          "decode: feature grids do not coincide");
  const int quarter = model.config.total_stride / 4;
  require(fine_target.channels == 3 &&
              fine_target.height == target_features.height * quarter &&
              fine_target.width == target_features.width * quarter,
          "decode: fine_target must be RGB at the 1/4 working scale");
  Tensor4<S> cat = concat_channels(target_features, warped_mask_features);
  if (trace) {
    trace->cat = cat;
    trace->split_channels = target_features.channels;
    trace->stages.clear();
    trace->refine_inputs.clear();
    trace->refine_pre.clear();
  }

  Tensor4<S> a1 = conv2d(cat, model.decoder.gcn_row_a);
  Tensor4<S> b1 = conv2d(cat, model.decoder.gcn_col_b);
  if (trace) {
    trace->gcn_a1 = a1;
    trace->gcn_b1 = b1;
  }
  Tensor4<S> x = conv2d(a1, model.decoder.gcn_col_a);
  x.data += conv2d(b1, model.decoder.gcn_row_b).data;

  for (const auto& stage : model.decoder.stages) {
    typename DecodeTrace<S>::Stage st;
    if (trace) st.input = x;
    Tensor4<S> up = transposed_conv2d(x, stage.up);
    Tensor4<S> br1 = conv2d(up, stage.br1);
    Tensor4<S> br1_act = relu(br1);
    Tensor4<S> br2 = conv2d(br1_act, stage.br2);
    x = up;
    x.data += br2.data;
    if (trace) {
      st.up = std::move(up);
      st.br1_pre = std::move(br1);
      st.br1_act = std::move(br1_act);
      trace->stages.push_back(std::move(st));
    }
  }

  {
    Tensor4<S> fine = fine_target;
    fine.data -= S(0.5);
    x = concat_channels(x, fine);
  }
  for (const auto& r : model.decoder.refine) {
    if (trace) trace->refine_inputs.push_back(x);
    Tensor4<S> pre = conv2d(x, r);
    if (trace) trace->refine_pre.push_back(pre);
    x = relu(pre);
  }

  if (trace) trace->score = x;
  Tensor4<S> logits = conv2d(x, model.decoder.out_conv);
  logits.data *= static_cast<S>(model.config.logit_scale);
  Tensor4<S> prob_small = sigmoid(logits);
  if (trace) trace->prob_small = prob_small;
  Tensor4<S> prob = bilinear_resize(prob_small, prob_small.height * 4, prob_small.width * 4);
  // interpolation of [0,1] values can overshoot by an ulp
  prob.data = prob.data.max(S(0)).min(S(1));
  return prob;
}

template <typename S>
struct DecodeBackward {
  Tensor4<S> grad_target_features;
  Tensor4<S> grad_warped_features;
  Tensor4<S> grad_fine_target;  // not trainable upstream; kept for checks
};

/// Backward through decode; accumulates decoder parameter gradients.
template <typename S>
DecodeBackward<S> decode_backward(const ModelParameters<S>& model,
                                  const DecodeTrace<S>& trace,
                                  const Tensor4<S>& grad_prob,
                                  DecoderParams<S>& grads) {
  Tensor4<S> g = bilinear_resize_backward(grad_prob, trace.prob_small.height,
                                          trace.prob_small.width);
  g = sigmoid_backward(trace.prob_small, g);
  g.data *= static_cast<S>(model.config.logit_scale);

  ConvBackward<S> out_back = conv2d_backward(trace.score, model.decoder.out_conv, g);
  grads.out_conv.weights += out_back.grad_params.weights;
  grads.out_conv.bias += out_back.grad_params.bias;
  g = std::move(out_back.grad_input);

  for (std::size_t i = model.decoder.refine.size(); i-- > 0;) {
    g = relu_backward(trace.refine_pre[i], g);
    ConvBackward<S> back = conv2d_backward(trace.refine_inputs[i], model.decoder.refine[i], g);
    grads.refine[i].weights += back.grad_params.weights;
    grads.refine[i].bias += back.grad_params.bias;
    g = std::move(back.grad_input);
  }

  Tensor4<S> grad_fine;
  {
    auto [g_x, g_fine] = split_channels(g, g.channels - 3);
    g = std::move(g_x);
    grad_fine = std::move(g_fine);
  }

  for (std::size_t i = model.decoder.stages.size(); i-- > 0;) {
    const auto& stage = model.decoder.stages[i];
    const auto& st = trace.stages[i];
    // x_out = up + br2(relu(br1(up)))
    ConvBackward<S> br2_back = conv2d_backward(st.br1_act, stage.br2, g);
    grads.stages[i].br2.weights += br2_back.grad_params.weights;
    grads.stages[i].br2.bias += br2_back.grad_params.bias;
    Tensor4<S> g_br1 = relu_backward(st.br1_pre, br2_back.grad_input);
    ConvBackward<S> br1_back = conv2d_backward(st.up, stage.br1, g_br1);
    grads.stages[i].br1.weights += br1_back.grad_params.weights;
    grads.stages[i].br1.bias += br1_back.grad_params.bias;
    Tensor4<S> g_up = g;
    g_up.data += br1_back.grad_input.data;
    ConvBackward<S> up_back = transposed_conv2d_backward(st.input, stage.up, g_up);
    grads.stages[i].up.weights += up_back.grad_params.weights;
    grads.stages[i].up.bias += up_back.grad_params.bias;
    g = std::move(up_back.grad_input);
  }

  // GCN: both branches read the concatenated input.
  ConvBackward<S> col_a_back = conv2d_backward(trace.gcn_a1, model.decoder.gcn_col_a, g);
  grads.gcn_col_a.weights += col_a_back.grad_params.weights;
  grads.gcn_col_a.bias += col_a_back.grad_params.bias;
  ConvBackward<S> row_a_back =
      conv2d_backward(trace.cat, model.decoder.gcn_row_a, col_a_back.grad_input);
  grads.gcn_row_a.weights += row_a_back.grad_params.weights;
  grads.gcn_row_a.bias += row_a_back.grad_params.bias;

  ConvBackward<S> row_b_back = conv2d_backward(trace.gcn_b1, model.decoder.gcn_row_b, g);
  grads.gcn_row_b.weights += row_b_back.grad_params.weights;
  grads.gcn_row_b.bias += row_b_back.grad_params.bias;
  ConvBackward<S> col_b_back =
      conv2d_backward(trace.cat, model.decoder.gcn_col_b, row_b_back.grad_input);
  grads.gcn_col_b.weights += col_b_back.grad_params.weights;
  grads.gcn_col_b.bias += col_b_back.grad_params.bias;

  Tensor4<S> g_cat = row_a_back.grad_input;
  g_cat.data += col_b_back.grad_input.data;
  auto [g_target, g_warped] = split_channels(g_cat, trace.split_channels);
  return {std::move(g_target), std::move(g_warped), std::move(grad_fine)};
}

}  // namespace mtn
