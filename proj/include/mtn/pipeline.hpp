#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mtn/blocks.hpp"
#include "mtn/adam.hpp"
#include "mtn/matching.hpp"

namespace mtn {

/// Raised when training or inference produces non-finite values.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class WarpMode { kScatter, kGather };

struct ForwardOptions {
  WarpMode warp = WarpMode::kScatter;
  int window = 0;  // correlation window d of the per-pixel comparison
};

struct TrainConfig {
  double lr = 1e-5;
  double fine_tune_lr = 5e-6;
  int iterations = 400;
  int fine_tune_iterations = 3;
  std::uint32_t seed = 0;
  int patch = 128;  // training crop, must be divisible by the total stride

  double flip_prob = 0.5;
  double brightness_delta = 0.2;
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double scale_min = 0.8;
  double scale_max = 1.2;
  double rotation_deg = 15.0;
  double translate_frac = 0.1;

  bool double_precision = false;
  bool soft_matching_grad = false;
  double soft_temperature = 1.0;
  ForwardOptions forward;

  // lr == 0 is tolerated here so no-op training runs stay expressible;
  // config files are validated strictly (lr > 0) on parse.
  void validate(const ModelConfig& model) const {
    require(lr >= 0, "TrainConfig: lr must be >= 0");
    require(fine_tune_lr >= 0, "TrainConfig: fine_tune_lr must be >= 0");
    require(iterations >= 1, "TrainConfig: iterations must be >= 1");
    require(patch >= model.total_stride && patch % model.total_stride == 0,
            "TrainConfig: patch size must be divisible by the total stride");
    require(flip_prob >= 0 && flip_prob <= 1, "TrainConfig: flip_prob must be in [0,1]");
    require(brightness_delta >= 0, "TrainConfig: brightness_delta must be >= 0");
    require(contrast_min > 0 && contrast_min <= contrast_max,
            "TrainConfig: contrast range invalid");
    require(scale_min > 0 && scale_min <= scale_max, "TrainConfig: scale range invalid");
    require(rotation_deg >= 0, "TrainConfig: rotation range must be >= 0");
    require(translate_frac >= 0, "TrainConfig: translation range must be >= 0");
    require(soft_temperature > 0, "TrainConfig: soft_temperature must be > 0");
  }
};

enum class SampleProvenance { kSynthetic, kLoaded };

template <typename S>
struct TrainingSample {
  Tensor4<S> image;  // RGB, [0,1]
  Tensor4<S> mask;   // single channel, {0,1}
  SampleProvenance provenance = SampleProvenance::kSynthetic;

  void validate() const {
    require(image.channels == 3, "TrainingSample: image must be RGB");
    require(mask.channels == 1, "TrainingSample: mask must be single channel");
    require(image.height == mask.height && image.width == mask.width,
            "TrainingSample: image and mask sizes differ");
    require(((mask.data == S(0)) || (mask.data == S(1))).all(),
            "TrainingSample: mask must be binary {0,1}");
  }
};

// ---------------------------------------------------------------------------
// Forward pass

template <typename S>
struct ForwardTrace {
  StackTrace<S> enc_ref, enc_tgt, mask_enc;
  EmbedTrace<S> emb_ref, emb_tgt;
  Tensor4<S> emb_ref_out, emb_tgt_out;
  Tensor4<S> mask_feats;
  DisplacementField<S> field;
  WarpPlan plan;
  Tensor4<S> warped;
  DecodeTrace<S> decode;
};

/// Full forward pass: encode both frames with the shared encoder, embed,
/// match globally, decode displacements, encode and warp the reference
/// mask, then decode to a full-resolution foreground probability map.
/// Consumes only the reference frame and mask; no temporal state.
template <typename S>
Tensor4<S> forward(const Tensor4<S>& ref_frame, const Tensor4<S>& ref_mask,
                   const Tensor4<S>& tgt_frame, const ModelParameters<S>& model,
                   const ForwardOptions& options = {},
                   ForwardTrace<S>* trace = nullptr) {
  require(ref_frame.height == tgt_frame.height && ref_frame.width == tgt_frame.width,
          "forward: reference and target frames must have equal size");
  require(ref_mask.height == ref_frame.height && ref_mask.width == ref_frame.width,
          "forward: reference mask size must match the frames");

  Tensor4<S> feats_ref = encode_image(ref_frame, model, trace ? &trace->enc_ref : nullptr);
  Tensor4<S> feats_tgt = encode_image(tgt_frame, model, trace ? &trace->enc_tgt : nullptr);
  Tensor4<S> emb_ref = embed(feats_ref, model, trace ? &trace->emb_ref : nullptr);
  Tensor4<S> emb_tgt = embed(feats_tgt, model, trace ? &trace->emb_tgt : nullptr);

  CorrelationVolume<S> volume = global_correlation(emb_ref, emb_tgt, options.window);
  DisplacementField<S> field = decode_displacement(volume);

  Tensor4<S> mask_feats = encode_mask(ref_mask, model, trace ? &trace->mask_enc : nullptr);
  require(mask_feats.height == emb_ref.height && mask_feats.width == emb_ref.width,
          "forward: mask-encoder grid does not coincide with the embedding grid");

  WarpPlan plan = options.warp == WarpMode::kScatter ? plan_scatter(field)
                                                     : plan_gather(volume);
  Tensor4<S> warped = apply_warp(mask_feats, plan);

  Tensor4<S> fine_target =
      bilinear_resize(tgt_frame, tgt_frame.height / 4, tgt_frame.width / 4);
  Tensor4<S> prob =
      decode(emb_tgt, warped, fine_target, model, trace ? &trace->decode : nullptr);
  if (trace) {
    trace->emb_ref_out = std::move(emb_ref);
    trace->emb_tgt_out = std::move(emb_tgt);
    trace->mask_feats = std::move(mask_feats);
    trace->field = std::move(field);
    trace->plan = std::move(plan);
    trace->warped = std::move(warped);
  }
  return prob;
}

// ---------------------------------------------------------------------------
// Dice loss

/// 1 - (2*sum(g*p) + eps) / (sum(g^2) + sum(p^2) + eps); sums accumulate
/// in double regardless of the tensor scalar.
template <typename S>
double dice_loss(const Tensor4<S>& pred, const Tensor4<S>& truth, double eps = 1.0) {
  require(pred.same_shape(truth), "dice_loss: size mismatch");
  require(((pred.data >= S(0)) && (pred.data <= S(1))).all(),
          "dice_loss: predictions must lie in [0,1]");
  const double inter = (pred.data.template cast<double>() * truth.data.template cast<double>()).sum();
  const double g2 = truth.data.template cast<double>().square().sum();
  const double p2 = pred.data.template cast<double>().square().sum();
  return 1.0 - (2.0 * inter + eps) / (g2 + p2 + eps);
}

template <typename S>
Tensor4<S> dice_loss_backward(const Tensor4<S>& pred, const Tensor4<S>& truth,
                              double eps = 1.0) {
  require(pred.same_shape(truth), "dice_loss_backward: size mismatch");
  const double inter = (pred.data.template cast<double>() * truth.data.template cast<double>()).sum();
  const double g2 = truth.data.template cast<double>().square().sum();
  const double p2 = pred.data.template cast<double>().square().sum();
  const double num = 2.0 * inter + eps;
  const double den = g2 + p2 + eps;
  // d/dp_i [1 - num/den] = (num * 2p_i - 2g_i * den) / den^2
  Tensor4<S> grad = zeros_like(pred);
  grad.data = ((pred.data.template cast<double>() * (2.0 * num) -
                truth.data.template cast<double>() * (2.0 * den)) /
               (den * den))
                  .template cast<S>();
  return grad;
}

// ---------------------------------------------------------------------------
// Multi-object fusion

/// Per-object foreground probabilities plus the derived background map
/// p_0 = 1 - (1/M) * sum_m p_m.
template <typename S>
struct ObjectProbabilitySet {
  std::vector<Tensor4<S>> object_probs;  // p_1 .. p_M
  Tensor4<S> background;                 // p_0, derived

  static ObjectProbabilitySet from_objects(std::vector<Tensor4<S>> probs) {
    require(!probs.empty(), "ObjectProbabilitySet: M must be >= 1");
    for (const auto& p : probs) {
      require(p.batch == 1 && p.channels == 1, "ObjectProbabilitySet: maps must be single channel");
      require(p.same_shape(probs.front()), "ObjectProbabilitySet: map sizes differ");
      require(((p.data >= S(0)) && (p.data <= S(1))).all(),
              "ObjectProbabilitySet: probabilities must lie in [0,1]");
    }
    ObjectProbabilitySet set;
    set.background = zeros_like(probs.front());
    for (const auto& p : probs) set.background.data += p.data;
    set.background.data = S(1) - set.background.data / static_cast<S>(probs.size());
    set.object_probs = std::move(probs);
    return set;
  }

  int object_count() const { return static_cast<int>(object_probs.size()); }
};

/// Argmax over {p_0, p_1, ..., p_M} per pixel; ties take the lowest label.
template <typename S>
LabelImage fuse_multi_object(const ObjectProbabilitySet<S>& set) {
  const auto& bg = set.background;
  LabelImage out(bg.height, bg.width);
  for (int y = 0; y < bg.height; ++y) {
    for (int x = 0; x < bg.width; ++x) {
      S best = bg(0, 0, y, x);
      int label = 0;
      for (int m = 0; m < set.object_count(); ++m) {
        const S v = set.object_probs[static_cast<std::size_t>(m)](0, 0, y, x);
        if (v > best) {
          best = v;
          label = m + 1;
        }
      }
      out.at(y, x) = static_cast<std::uint8_t>(label);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pair synthesis

/// Inverse affine map from output-crop pixel coordinates to source
/// coordinates, shared by the image (bilinear) and mask (nearest)
/// resampling paths so the two always transform identically.
struct GeometricTransform {
  double a00 = 1, a01 = 0, b0 = 0;  // src_x = a00*x + a01*y + b0
  double a10 = 0, a11 = 1, b1 = 0;  // src_y = a10*x + a11*y + b1
  int out_h = 0, out_w = 0;
};

inline GeometricTransform make_transform(int src_h, int src_w, int crop, bool flip,
                                         double scale, double rot_deg,
                                         double translate_x, double translate_y) {
  require(crop >= 1 && crop <= src_h && crop <= src_w, "make_transform: crop does not fit");
  GeometricTransform t;
  t.out_h = t.out_w = crop;
  const double rad = rot_deg * (M_PI / 180.0);
  const double c = std::cos(rad), s = std::sin(rad);
  const double inv = 1.0 / scale;
  // inverse of (rotate . scale . flip) about the image center, then undo
  // translation and the centered crop offset
  const double fx = flip ? -1.0 : 1.0;
  t.a00 = fx * inv * c;
  t.a01 = fx * inv * s;
  t.a10 = -inv * s;
  t.a11 = inv * c;
  const double ctr_x = (src_w - 1) / 2.0, ctr_y = (src_h - 1) / 2.0;
  const double off_x = (src_w - crop) / 2.0, off_y = (src_h - crop) / 2.0;
  const double qx = off_x - ctr_x - translate_x;
  const double qy = off_y - ctr_y - translate_y;
  t.b0 = t.a00 * qx + t.a01 * qy + ctr_x;
  t.b1 = t.a10 * qx + t.a11 * qy + ctr_y;
  return t;
}

/// Bilinear resampling with zero outside the source frame.
template <typename S>
Tensor4<S> transform_image(const Tensor4<S>& img, const GeometricTransform& t) {
  Tensor4<S> out(img.batch, img.channels, t.out_h, t.out_w);
  for (int y = 0; y < t.out_h; ++y) {
    for (int x = 0; x < t.out_w; ++x) {
      const double sx = t.a00 * x + t.a01 * y + t.b0;
      const double sy = t.a10 * x + t.a11 * y + t.b1;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double wx = sx - x0, wy = sy - y0;
      for (int b = 0; b < img.batch; ++b) {
        for (int ch = 0; ch < img.channels; ++ch) {
          auto tap = [&](int yy, int xx) -> double {
            if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) return 0.0;
            return static_cast<double>(img(b, ch, yy, xx));
          };
          const double v = tap(y0, x0) * (1 - wy) * (1 - wx) +
                           tap(y0, x0 + 1) * (1 - wy) * wx +
                           tap(y0 + 1, x0) * wy * (1 - wx) +
                           tap(y0 + 1, x0 + 1) * wy * wx;
          out(b, ch, y, x) = static_cast<S>(v);
        }
      }
    }
  }
  return out;
}

/// Nearest-neighbour resampling; outside the source counts as background.
template <typename S>
Tensor4<S> transform_mask(const Tensor4<S>& mask, const GeometricTransform& t) {
  Tensor4<S> out(mask.batch, mask.channels, t.out_h, t.out_w);
  for (int y = 0; y < t.out_h; ++y) {
    for (int x = 0; x < t.out_w; ++x) {
      const double sx = t.a00 * x + t.a01 * y + t.b0;
      const double sy = t.a10 * x + t.a11 * y + t.b1;
      const int xi = static_cast<int>(std::llround(sx));
      const int yi = static_cast<int>(std::llround(sy));
      for (int b = 0; b < mask.batch; ++b) {
        for (int ch = 0; ch < mask.channels; ++ch) {
          out(b, ch, y, x) = (yi >= 0 && yi < mask.height && xi >= 0 && xi < mask.width)
                                 ? mask(b, ch, yi, xi)
                                 : S(0);
        }
      }
    }
  }
  return out;
}

template <typename S>
struct PairSample {
  Tensor4<S> ref_image, ref_mask;
  Tensor4<S> tgt_image, tgt_mask;
  GeometricTransform ref_geo, tgt_geo;
};

namespace detail {

inline double draw_uniform(std::mt19937& rng, double lo, double hi) {
  if (lo == hi) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

template <typename S>
void photometric(Tensor4<S>& img, double brightness, double contrast) {
  if (brightness == 0.0 && contrast == 1.0) return;  // keep identity bit-exact
  img.data = ((img.data - S(0.5)) * static_cast<S>(contrast) + S(0.5) +
              static_cast<S>(brightness))
                 .max(S(0))
                 .min(S(1));
}

}  // namespace detail

/// Two independently transformed views of one annotated image. Geometry
/// applies identically to image (bilinear) and mask (nearest);
/// photometric jitter touches only the image. A transform whose mask
/// comes out empty is redrawn up to 8 times.
template <typename S>
PairSample<S> synthesize_pair(const TrainingSample<S>& sample, std::mt19937& rng,
                              const TrainConfig& cfg) {
  sample.validate();
  require(cfg.patch <= sample.image.height && cfg.patch <= sample.image.width,
          "synthesize_pair: crop does not fit the sample");

  auto draw_view = [&](Tensor4<S>& image_out, Tensor4<S>& mask_out,
                       GeometricTransform& geo_out) {
    constexpr int kMaxRetries = 8;
    for (int attempt = 0; attempt <= kMaxRetries; ++attempt) {
      const bool flip = std::bernoulli_distribution(cfg.flip_prob)(rng);
      const double brightness =
          detail::draw_uniform(rng, -cfg.brightness_delta, cfg.brightness_delta);
      const double contrast = detail::draw_uniform(rng, cfg.contrast_min, cfg.contrast_max);
      const double scale = detail::draw_uniform(rng, cfg.scale_min, cfg.scale_max);
      const double rot = detail::draw_uniform(rng, -cfg.rotation_deg, cfg.rotation_deg);
      const double tx = detail::draw_uniform(rng, -cfg.translate_frac, cfg.translate_frac) *
                        sample.image.width;
      const double ty = detail::draw_uniform(rng, -cfg.translate_frac, cfg.translate_frac) *
                        sample.image.height;
      GeometricTransform geo = make_transform(sample.image.height, sample.image.width,
                                              cfg.patch, flip, scale, rot, tx, ty);
      Tensor4<S> mask = transform_mask(sample.mask, geo);
      if (mask.data.sum() == S(0)) continue;
      Tensor4<S> image = transform_image(sample.image, geo);
      detail::photometric(image, brightness, contrast);
      image_out = std::move(image);
      mask_out = std::move(mask);
      geo_out = geo;
      return;
    }
    throw NumericError("synthesize_pair: transformed mask stayed empty after 8 retries");
  };

  PairSample<S> pair;
  draw_view(pair.ref_image, pair.ref_mask, pair.ref_geo);
  draw_view(pair.tgt_image, pair.tgt_mask, pair.tgt_geo);
  return pair;
}

// ---------------------------------------------------------------------------
// Synthetic training data

namespace detail {

// Smoothed per-channel noise: a coarse random grid upsampled bilinearly.
template <typename S>
Tensor4<S> noise_field(std::mt19937& rng, int channels, int h, int w, double amplitude,
                       int cells = 8) {
  Tensor4<S> coarse(1, channels, cells, cells);
  std::uniform_real_distribution<double> dist(-amplitude, amplitude);
  for (Eigen::Index i = 0; i < coarse.data.size(); ++i) {
    coarse.data[i] = static_cast<S>(dist(rng));
  }
  return bilinear_resize(coarse, h, w);
}

}  // namespace detail

/// One textured background plus one filled random ellipse or convex
/// polygon of contrasting texture; the mask is the shape's support and
/// covers between 2% and 40% of the image.
template <typename S>
TrainingSample<S> generate_synthetic_sample(std::mt19937& rng, int size) {
  require(size >= 16, "generate_synthetic_sample: size too small");
  const int h = size, w = size;

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::Vector3d bg_color, obj_color;
  for (int c = 0; c < 3; ++c) bg_color[c] = 0.1 + 0.8 * unit(rng);
  for (int attempt = 0;; ++attempt) {
    for (int c = 0; c < 3; ++c) obj_color[c] = 0.1 + 0.8 * unit(rng);
    if ((obj_color - bg_color).norm() >= 0.80) break;
    if (attempt >= 64) {
      obj_color = Eigen::Vector3d::Ones() - bg_color;
      break;
    }
  }

  for (int attempt = 0; attempt < 64; ++attempt) {
    const double area_frac = 0.08 + 0.27 * unit(rng);
    const double target_area = area_frac * h * w;
    const double cx = w * (0.35 + 0.3 * unit(rng));
    const double cy = h * (0.35 + 0.3 * unit(rng));

    LabelImage mask(h, w);
    if (unit(rng) < 0.5) {
      const double aspect = 0.6 + unit(rng);
      const double a = std::sqrt(target_area * aspect / M_PI);
      const double b = target_area / (M_PI * a);
      const double theta = unit(rng) * M_PI;
      const double ct = std::cos(theta), st = std::sin(theta);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double dx = x - cx, dy = y - cy;
          const double u = (dx * ct + dy * st) / a;
          const double v = (-dx * st + dy * ct) / b;
          if (u * u + v * v <= 1.0) mask.at(y, x) = 1;
        }
      }
    } else {
      const int verts = 5 + static_cast<int>(unit(rng) * 4);
      const double radius = std::sqrt(target_area / M_PI);
      std::vector<double> px(static_cast<std::size_t>(verts)), py(px.size());
      for (int i = 0; i < verts; ++i) {
        const double ang = 2.0 * M_PI * (i + 0.6 * unit(rng)) / verts;
        const double r = radius * (0.7 + 0.6 * unit(rng));
        px[static_cast<std::size_t>(i)] = cx + r * std::cos(ang);
        py[static_cast<std::size_t>(i)] = cy + r * std::sin(ang);
      }
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          bool inside = false;  // even-odd crossing rule
          for (std::size_t i = 0, j = px.size() - 1; i < px.size(); j = i++) {
            if ((py[i] > y) != (py[j] > y) &&
                x < (px[j] - px[i]) * (y - py[i]) / (py[j] - py[i]) + px[i]) {
              inside = !inside;
            }
          }
          if (inside) mask.at(y, x) = 1;
        }
      }
    }

    double area = 0;
    for (auto v : mask.labels) area += v;
    const double frac = area / (static_cast<double>(h) * w);
    if (frac < 0.02 || frac > 0.40) continue;

    Tensor4<S> bg_noise = detail::noise_field<S>(rng, 3, h, w, 0.10);
    Tensor4<S> obj_noise = detail::noise_field<S>(rng, 3, h, w, 0.10);
    TrainingSample<S> sample;
    sample.image = Tensor4<S>(1, 3, h, w);
    sample.mask = binary_mask_tensor<S>(mask, 1);
    sample.provenance = SampleProvenance::kSynthetic;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const bool fg = mask.at(y, x) != 0;
          const double base = fg ? obj_color[c] : bg_color[c];
          const double tex = fg ? obj_noise(0, c, y, x) : bg_noise(0, c, y, x);
          sample.image(0, c, y, x) =
              static_cast<S>(std::clamp(base + tex, 0.0, 1.0));
        }
      }
    }
    return sample;
  }
  throw NumericError("generate_synthetic_sample: could not place a shape within area bounds");
}

// ---------------------------------------------------------------------------
// Training

template <typename S>
struct TrainResult {
  ModelParameters<S> params;
  std::vector<double> loss_trace;
};

namespace detail {

template <typename S>
void flatten_params(const ModelParameters<S>& params, ArrayX<S>& flat) {
  flat.resize(params.param_count());
  Eigen::Index off = 0;
  params.for_each_layer([&](const std::string&, const ConvParams<S>& p) {
    flat.segment(off, p.weights.size()) = p.weights;
    off += p.weights.size();
    flat.segment(off, p.bias.size()) = p.bias;
    off += p.bias.size();
  });
}

template <typename S>
void unflatten_params(const ArrayX<S>& flat, ModelParameters<S>& params) {
  Eigen::Index off = 0;
  params.for_each_layer([&](const std::string&, ConvParams<S>& p) {
    p.weights = flat.segment(off, p.weights.size());
    off += p.weights.size();
    p.bias = flat.segment(off, p.bias.size());
    off += p.bias.size();
  });
}

}  // namespace detail

/// Backpropagation of one training step. The argmax displacement and the
/// scatter warp are non-differentiable, so the displacement routing is
/// held fixed: gradients reach the mask encoder through the warp's value
/// copy and reach the embedding/encoder through the decoder's
/// image-feature branch. The optional soft path adds softmax-relaxed
/// gradients onto both embedding branches.
template <typename S>
void backward_step(const ModelParameters<S>& params, const ForwardTrace<S>& trace,
                   const Tensor4<S>& grad_prob, const TrainConfig& cfg,
                   ModelParameters<S>& grads) {
  DecodeBackward<S> dec =
      decode_backward(params, trace.decode, grad_prob, grads.decoder);

  Tensor4<S> g_mask_feats = warp_backward(dec.grad_warped_features, trace.plan);
  stack_backward(params.mask_encoder, trace.mask_enc, g_mask_feats, grads.mask_encoder);

  Tensor4<S> g_feats_tgt =
      embed_backward(params, trace.emb_tgt, dec.grad_target_features, grads.embedding);
  if (!params.config.freeze_encoder) {
    stack_backward(params.encoder, trace.enc_tgt, g_feats_tgt, grads.encoder);
  }

  if (cfg.soft_matching_grad) {
    SoftMatchGrads<S> soft = soft_matching_backward(
        trace.emb_ref_out, trace.emb_tgt_out, trace.mask_feats,
        dec.grad_warped_features, static_cast<S>(cfg.soft_temperature));
    Tensor4<S> g_ref = embed_backward(params, trace.emb_ref, soft.grad_emb_ref, grads.embedding);
    Tensor4<S> g_tgt = embed_backward(params, trace.emb_tgt, soft.grad_emb_tgt, grads.embedding);
    if (!params.config.freeze_encoder) {
      stack_backward(params.encoder, trace.enc_ref, g_ref, grads.encoder);
      stack_backward(params.encoder, trace.enc_tgt, g_tgt, grads.encoder);
    }
  }
}

/// Image-only training: every iteration draws a sample, synthesizes a
/// transformed pair, runs the forward pass, and applies one Adam step on
/// the dice loss. Pass `initial` to continue from existing parameters
/// (the fine-tune stage is a second call with its own pool and lr).
template <typename S>
TrainResult<S> train(const std::vector<TrainingSample<S>>& samples,
                     const TrainConfig& cfg, const ModelConfig& model_config,
                     const std::optional<ModelParameters<S>>& initial = {}) {
  require(!samples.empty(), "train: need at least one sample");
  cfg.validate(model_config);
  for (const auto& s : samples) s.validate();

  TrainResult<S> result;
  result.params = initial ? *initial : init_model<S>(model_config, cfg.seed);
  result.params.validate();

  std::mt19937 rng(cfg.seed + 0x9e3779b9u);
  AdamState<S> opt(result.params.param_count(), static_cast<S>(cfg.lr));
  ArrayX<S> flat_params, flat_grads;
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);

  result.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations));
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto& sample = samples[pick(rng)];
    PairSample<S> pair = synthesize_pair(sample, rng, cfg);

    ForwardTrace<S> trace;
    Tensor4<S> prob = forward(pair.ref_image, pair.ref_mask, pair.tgt_image,
                              result.params, cfg.forward, &trace);
    if (!prob.all_finite()) {
      throw NumericError("train: non-finite prediction at iteration " + std::to_string(it));
    }
    const double loss = dice_loss(prob, pair.tgt_mask, 1.0);
    if (!std::isfinite(loss)) {
      throw NumericError("train: non-finite loss at iteration " + std::to_string(it));
    }
    result.loss_trace.push_back(loss);

    Tensor4<S> grad_prob = dice_loss_backward(prob, pair.tgt_mask, 1.0);
    ModelParameters<S> grads = zeros_like(result.params);
    backward_step(result.params, trace, grad_prob, cfg, grads);

    detail::flatten_params(result.params, flat_params);
    detail::flatten_params(grads, flat_grads);
    if (!flat_grads.isFinite().all()) {
      throw NumericError("train: non-finite gradient at iteration " + std::to_string(it));
    }
    adam_step(flat_params, flat_grads, opt);
    detail::unflatten_params(flat_params, result.params);
  }
  return result;
}

}  // namespace mtn
