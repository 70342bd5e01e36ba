#pragma once

#include <Eigen/Dense>

#include <future>
#include <limits>
#include <thread>
#include <utility>
#include <vector>

#include "mtn/tensor.hpp"

namespace mtn {

/// Per-reference-pixel correlation scores over all displaced target
/// positions. For a grid of w x h pixels the maximum displacement is
/// d_m = max(w, h), giving D = 2*d_m + 1 and a D^2-long score list per
/// pixel, laid out [y][x][h] with h = (dy + d_m)*D + (dx + d_m).
/// Offsets that land outside the target grid hold the sentinel (the most
/// negative representable score) so they can never win an argmax over
/// finite in-frame scores.
template <typename S>
struct CorrelationVolume {
  int grid_w = 0;
  int grid_h = 0;
  int d_m = 0;
  ArrayX<S> scores;

  static constexpr S sentinel() { return std::numeric_limits<S>::lowest(); }

  int patch_extent() const { return 2 * d_m + 1; }
  Eigen::Index per_pixel() const {
    return static_cast<Eigen::Index>(patch_extent()) * patch_extent();
  }

  CorrelationVolume() = default;
  CorrelationVolume(int w, int h)
      : grid_w(w), grid_h(h), d_m(std::max(w, h)) {
    require(w >= 1 && h >= 1, "CorrelationVolume: grid must be non-empty");
    scores = ArrayX<S>::Constant(
        static_cast<Eigen::Index>(w) * h * per_pixel(), sentinel());
  }

  S score_at(int x, int y, int h_idx) const {
    return scores[(static_cast<Eigen::Index>(y) * grid_w + x) * per_pixel() + h_idx];
  }
  S& score_at(int x, int y, int h_idx) {
    return scores[(static_cast<Eigen::Index>(y) * grid_w + x) * per_pixel() + h_idx];
  }
};

/// Best-match displacement per reference pixel, in feature-grid units.
template <typename S>
struct DisplacementField {
  int grid_w = 0;
  int grid_h = 0;
  std::vector<int> dx;
  std::vector<int> dy;
  ArrayX<S> best_score;

  DisplacementField() = default;
  DisplacementField(int w, int h)
      : grid_w(w),
        grid_h(h),
        dx(static_cast<std::size_t>(w) * h, 0),
        dy(static_cast<std::size_t>(w) * h, 0),
        best_score(ArrayX<S>::Zero(static_cast<Eigen::Index>(w) * h)) {}

  std::size_t cell(int x, int y) const {
    return static_cast<std::size_t>(y) * grid_w + x;
  }
};

/// Index decoding of a flat per-pixel score position into a displacement:
/// dx = mod(h, 2*d_m + 1) - d_m, dy = div(h, 2*d_m + 1) - d_m.
inline std::pair<int, int> displacement_from_index(int h_idx, int d_m) {
  const int extent = 2 * d_m + 1;
  return {h_idx % extent - d_m, h_idx / extent - d_m};
}

namespace detail {

// Zero-copy (pixels x channels) view of a batch-1 feature map; the
// channel-major tensor layout is exactly a column-major matrix.
template <typename S>
Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>>
pixel_matrix(const Tensor4<S>& emb) {
  return {emb.channel_ptr(0, 0),
          static_cast<Eigen::Index>(emb.height) * emb.width, emb.channels};
}

}  // namespace detail

/// Windowed cross-correlation of two embedded pixels: the sum over
/// offsets o in [-d, d]^2 of the channel dot product at (ref_pos + o,
/// tgt_pos + o). Offsets falling outside either grid contribute zero.
/// Holds no trainable parameters.
template <typename S>
S correlation_score(const Tensor4<S>& emb_ref, const Tensor4<S>& emb_tgt,
                    int ref_x, int ref_y, int tgt_x, int tgt_y, int window) {
  require(emb_ref.batch == 1 && emb_tgt.batch == 1,
          "correlation_score: expects batch-1 embeddings");
  require(emb_ref.channels == emb_tgt.channels,
          "correlation_score: embedding channel mismatch");
  require(window >= 0, "correlation_score: window must be >= 0");
  require(ref_x >= 0 && ref_x < emb_ref.width && ref_y >= 0 && ref_y < emb_ref.height,
          "correlation_score: reference position out of grid");
  require(tgt_x >= 0 && tgt_x < emb_tgt.width && tgt_y >= 0 && tgt_y < emb_tgt.height,
          "correlation_score: target position out of grid");

  S acc = S(0);
  for (int oy = -window; oy <= window; ++oy) {
    for (int ox = -window; ox <= window; ++ox) {
      const int ry = ref_y + oy, rx = ref_x + ox;
      const int ty = tgt_y + oy, tx = tgt_x + ox;
      if (ry < 0 || ry >= emb_ref.height || rx < 0 || rx >= emb_ref.width) continue;
      if (ty < 0 || ty >= emb_tgt.height || tx < 0 || tx >= emb_tgt.width) continue;
      for (int c = 0; c < emb_ref.channels; ++c) {
        acc += emb_ref(0, c, ry, rx) * emb_tgt(0, c, ty, tx);
      }
    }
  }
  return acc;
}

namespace detail {

// Runs fn(row_begin, row_end) over fixed 8-row blocks of [0, rows). The
// block boundaries do not depend on the thread count, so serial and
// parallel execution perform identical per-block arithmetic; the work
// per row must touch disjoint state.
template <typename Fn>
void for_row_blocks(int rows, bool parallel, Fn&& fn) {
  constexpr int kChunk = 8;
  std::vector<std::pair<int, int>> blocks;
  for (int y0 = 0; y0 < rows; y0 += kChunk) {
    blocks.emplace_back(y0, std::min(y0 + kChunk, rows));
  }
  if (!parallel || blocks.size() < 2) {
    for (const auto& [y0, y1] : blocks) fn(y0, y1);
    return;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  const std::size_t workers = std::min<std::size_t>(hw ? hw : 2, blocks.size());
  std::vector<std::future<void>> futures;
  futures.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    futures.push_back(std::async(std::launch::async, [&fn, &blocks, t, workers] {
      for (std::size_t b = t; b < blocks.size(); b += workers) {
        fn(blocks[b].first, blocks[b].second);
      }
    }));
  }
  for (auto& f : futures) f.get();
}

}  // namespace detail

/// All-pairs correlation between reference and target embeddings on the
/// same grid. The per-pixel d=0 scores are rows of one Gram product; a
/// window > 0 adds the diagonally shifted sums of the windowed form.
/// Reference rows carry no shared mutable state, so the fill may run
/// data-parallel over row blocks.
template <typename S>
CorrelationVolume<S> global_correlation(const Tensor4<S>& emb_ref,
                                        const Tensor4<S>& emb_tgt,
                                        int window = 0, bool parallel = false) {
  require(emb_ref.batch == 1 && emb_tgt.batch == 1,
          "global_correlation: expects batch-1 embeddings");
  require(emb_ref.height == emb_tgt.height && emb_ref.width == emb_tgt.width,
          "global_correlation: grid mismatch");
  require(emb_ref.channels == emb_tgt.channels,
          "global_correlation: embedding channel mismatch");
  require(window >= 0, "global_correlation: window must be >= 0");

  const int w = emb_ref.width, h = emb_ref.height;
  const auto ref = detail::pixel_matrix(emb_ref);
  const auto tgt = detail::pixel_matrix(emb_tgt);
  CorrelationVolume<S> volume(w, h);
  const int extent = volume.patch_extent();
  const Eigen::Index per_pixel = volume.per_pixel();

  MatrixX<S> windowed;
  if (window > 0) {
    // base(i, j) = <ref_i, tgt_j>; the windowed score shifts both sides
    // by the same offset and sums where both stay on the grid.
    const Eigen::Index n = static_cast<Eigen::Index>(w) * h;
    MatrixX<S> base(n, n);
    base.noalias() = ref * tgt.transpose();
    windowed = MatrixX<S>::Zero(n, n);
    for (int oy = -window; oy <= window; ++oy) {
      for (int ox = -window; ox <= window; ++ox) {
        for (int ry = 0; ry < h; ++ry) {
          const int sy = ry + oy;
          if (sy < 0 || sy >= h) continue;
          for (int rx = 0; rx < w; ++rx) {
            const int sx = rx + ox;
            if (sx < 0 || sx >= w) continue;
            const Eigen::Index i = static_cast<Eigen::Index>(ry) * w + rx;
            const Eigen::Index is = static_cast<Eigen::Index>(sy) * w + sx;
            for (int ty = 0; ty < h; ++ty) {
              const int uy = ty + oy;
              if (uy < 0 || uy >= h) continue;
              for (int tx = 0; tx < w; ++tx) {
                const int ux = tx + ox;
                if (ux < 0 || ux >= w) continue;
                windowed(i, static_cast<Eigen::Index>(ty) * w + tx) +=
                    base(is, static_cast<Eigen::Index>(uy) * w + ux);
              }
            }
          }
        }
      }
    }
  }

  detail::for_row_blocks(h, parallel && window == 0, [&](int y0, int y1) {
    MatrixX<S> block;
    if (window == 0) {
      block.noalias() =
          ref.middleRows(static_cast<Eigen::Index>(y0) * w,
                         static_cast<Eigen::Index>(y1 - y0) * w) *
          tgt.transpose();
    }
    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < w; ++x) {
        const Eigen::Index i = static_cast<Eigen::Index>(y) * w + x;
        const Eigen::Index local = static_cast<Eigen::Index>(y - y0) * w + x;
        S* cell = volume.scores.data() + i * per_pixel;
        for (int ty = 0; ty < h; ++ty) {
          const Eigen::Index row_base =
              static_cast<Eigen::Index>(ty - y + volume.d_m) * extent;
          for (int tx = 0; tx < w; ++tx) {
            const Eigen::Index j = static_cast<Eigen::Index>(ty) * w + tx;
            cell[row_base + (tx - x + volume.d_m)] =
                window == 0 ? block(local, j) : windowed(i, j);
          }
        }
      }
    }
  });
  return volume;
}

/// Argmax decode of a correlation volume. Ties break to the lowest flat
/// index h; sentinel slots can never win against a finite score.
template <typename S>
DisplacementField<S> decode_displacement(const CorrelationVolume<S>& volume,
                                         bool parallel = false) {
  DisplacementField<S> field(volume.grid_w, volume.grid_h);
  const Eigen::Index per_pixel = volume.per_pixel();
  detail::for_row_blocks(volume.grid_h, parallel, [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < volume.grid_w; ++x) {
        const S* cell = volume.scores.data() +
                        (static_cast<Eigen::Index>(y) * volume.grid_w + x) * per_pixel;
        int best_h = -1;
        S best = CorrelationVolume<S>::sentinel();
        for (Eigen::Index h_idx = 0; h_idx < per_pixel; ++h_idx) {
          if (cell[h_idx] > best) {
            best = cell[h_idx];
            best_h = static_cast<int>(h_idx);
          }
        }
        if (best_h < 0) {
          throw std::logic_error("decode_displacement: all-sentinel pixel");
        }
        const auto [dx, dy] = displacement_from_index(best_h, volume.d_m);
        if (x + dx < 0 || x + dx >= volume.grid_w || y + dy < 0 ||
            y + dy >= volume.grid_h) {
          throw std::logic_error("decode_displacement: best match out of frame");
        }
        const auto cell_idx = field.cell(x, y);
        field.dx[cell_idx] = dx;
        field.dy[cell_idx] = dy;
        field.best_score[static_cast<Eigen::Index>(cell_idx)] = best;
      }
    }
  });
  return field;
}

/// Routing table for a warp: the winning reference cell per target cell,
/// or -1 where nothing landed.
struct WarpPlan {
  int grid_w = 0;
  int grid_h = 0;
  std::vector<int> source;
};

/// Scatter routing: every reference cell writes to its displaced target;
/// collisions go to the higher best_score, ties to the lowest reference
/// linear index.
template <typename S>
WarpPlan plan_scatter(const DisplacementField<S>& field) {
  WarpPlan plan{field.grid_w, field.grid_h,
                std::vector<int>(static_cast<std::size_t>(field.grid_w) * field.grid_h, -1)};
  std::vector<S> winning(plan.source.size(), std::numeric_limits<S>::lowest());
  for (int y = 0; y < field.grid_h; ++y) {
    for (int x = 0; x < field.grid_w; ++x) {
      const auto i = field.cell(x, y);
      const int tx = x + field.dx[i];
      const int ty = y + field.dy[i];
      require(tx >= 0 && tx < field.grid_w && ty >= 0 && ty < field.grid_h,
              "plan_scatter: displacement leaves the grid");
      const auto j = field.cell(tx, ty);
      const S s = field.best_score[static_cast<Eigen::Index>(i)];
      if (plan.source[j] < 0 || s > winning[j]) {
        plan.source[j] = static_cast<int>(i);
        winning[j] = s;
      }
    }
  }
  return plan;
}

/// Gather routing: every target cell pulls its best-scoring reference
/// cell (ties to the lowest reference index); no holes.
template <typename S>
WarpPlan plan_gather(const CorrelationVolume<S>& volume) {
  const int w = volume.grid_w, h = volume.grid_h;
  WarpPlan plan{w, h, std::vector<int>(static_cast<std::size_t>(w) * h, -1)};
  const int extent = volume.patch_extent();
  for (int ty = 0; ty < h; ++ty) {
    for (int tx = 0; tx < w; ++tx) {
      S best = CorrelationVolume<S>::sentinel();
      int best_ref = -1;
      for (int ry = 0; ry < h; ++ry) {
        for (int rx = 0; rx < w; ++rx) {
          const int h_idx = (ty - ry + volume.d_m) * extent + (tx - rx + volume.d_m);
          const S s = volume.score_at(rx, ry, h_idx);
          if (best_ref < 0 || s > best) {
            best = s;
            best_ref = ry * w + rx;
          }
        }
      }
      plan.source[static_cast<std::size_t>(ty) * w + tx] = best_ref;
    }
  }
  return plan;
}

/// Moves feature vectors along a warp plan; untouched cells stay zero.
/// Output vectors are verbatim copies, never blends.
template <typename S>
Tensor4<S> apply_warp(const Tensor4<S>& features, const WarpPlan& plan) {
  require(features.batch == 1, "apply_warp: expects batch-1 features");
  require(features.width == plan.grid_w && features.height == plan.grid_h,
          "apply_warp: grid mismatch");
  Tensor4<S> out = zeros_like(features);
  const Eigen::Index plane = features.plane();
  for (int c = 0; c < features.channels; ++c) {
    const S* src = features.channel_ptr(0, c);
    S* dst = out.channel_ptr(0, c);
    for (Eigen::Index j = 0; j < plane; ++j) {
      const int i = plan.source[static_cast<std::size_t>(j)];
      if (i >= 0) dst[j] = src[i];
    }
  }
  return out;
}

/// Adjoint of apply_warp: a reference cell accumulates the gradients of
/// every target cell it won.
template <typename S>
Tensor4<S> warp_backward(const Tensor4<S>& grad_out, const WarpPlan& plan) {
  require(grad_out.batch == 1, "warp_backward: expects batch-1 gradients");
  require(grad_out.width == plan.grid_w && grad_out.height == plan.grid_h,
          "warp_backward: grid mismatch");
  Tensor4<S> out = zeros_like(grad_out);
  const Eigen::Index plane = grad_out.plane();
  for (int c = 0; c < grad_out.channels; ++c) {
    const S* g = grad_out.channel_ptr(0, c);
    S* dst = out.channel_ptr(0, c);
    for (Eigen::Index j = 0; j < plane; ++j) {
      const int i = plan.source[static_cast<std::size_t>(j)];
      if (i >= 0) dst[i] += g[j];
    }
  }
  return out;
}

/// Scatter transfer of encoded mask features along a displacement field.
template <typename S>
Tensor4<S> warp_mask_features(const Tensor4<S>& mask_features,
                              const DisplacementField<S>& field) {
  require(mask_features.width == field.grid_w && mask_features.height == field.grid_h,
          "warp_mask_features: grid mismatch");
  return apply_warp(mask_features, plan_scatter(field));
}

template <typename S>
struct SoftMatchGrads {
  Tensor4<S> grad_emb_ref;
  Tensor4<S> grad_emb_tgt;
};

/// Softmax-over-scores relaxation of the transfer, used as a
/// straight-through gradient path for the embeddings: the forward pass
/// stays hard argmax + scatter, while this backward treats the warped
/// features as sum_i softmax(scores_i / tau) (x) mask_i.
template <typename S>
SoftMatchGrads<S> soft_matching_backward(const Tensor4<S>& emb_ref,
                                         const Tensor4<S>& emb_tgt,
                                         const Tensor4<S>& mask_features,
                                         const Tensor4<S>& grad_warped,
                                         S temperature = S(1)) {
  require(emb_ref.same_shape(emb_tgt), "soft_matching_backward: embedding shape mismatch");
  require(mask_features.height == emb_ref.height && mask_features.width == emb_ref.width,
          "soft_matching_backward: mask feature grid mismatch");
  require(grad_warped.same_shape(mask_features),
          "soft_matching_backward: warped gradient shape mismatch");
  require(temperature > S(0), "soft_matching_backward: temperature must be positive");

  const auto ref = detail::pixel_matrix(emb_ref);
  const auto tgt = detail::pixel_matrix(emb_tgt);
  const auto mask = detail::pixel_matrix(mask_features);
  const auto gw = detail::pixel_matrix(grad_warped);
  const Eigen::Index n = ref.rows();

  MatrixX<S> scores(n, n);
  scores.noalias() = ref * tgt.transpose();
  scores /= temperature;

  MatrixX<S> grad_scores(n, n);
  MatrixX<S> dp(n, n);
  dp.noalias() = mask * gw.transpose();  // dp(i, j) = <mask_i, grad_warped_j>
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Array<S, Eigen::Dynamic, 1> row = scores.row(i).array();
    row -= row.maxCoeff();
    Eigen::Array<S, Eigen::Dynamic, 1> p = row.exp();
    p /= p.sum();
    const S inner = (p * dp.row(i).transpose().array()).sum();
    grad_scores.row(i) =
        ((p * (dp.row(i).transpose().array() - inner)) / temperature).matrix().transpose();
  }

  SoftMatchGrads<S> grads{zeros_like(emb_ref), zeros_like(emb_tgt)};
  Eigen::Map<MatrixX<S>> gr(grads.grad_emb_ref.channel_ptr(0, 0), n, emb_ref.channels);
  Eigen::Map<MatrixX<S>> gt(grads.grad_emb_tgt.channel_ptr(0, 0), n, emb_tgt.channels);
  gr.noalias() = grad_scores * tgt;
  gt.noalias() = grad_scores.transpose() * ref;
  return grads;
}

}  // namespace mtn
