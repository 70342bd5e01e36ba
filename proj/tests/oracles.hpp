// Test-only reference implementations, independent of the library's
// GEMM/scan paths: everything here is direct nested-loop evaluation.
#pragma once

#include <mtn/conv.hpp>
#include <mtn/matching.hpp>

namespace oracles {

template <typename S>
mtn::Tensor4<S> naive_conv2d(const mtn::Tensor4<S>& in, const mtn::ConvParams<S>& p) {
  const int out_h = (in.height + 2 * p.pad_h - p.kh) / p.stride + 1;
  const int out_w = (in.width + 2 * p.pad_w - p.kw) / p.stride + 1;
  mtn::Tensor4<S> out(in.batch, p.out_channels, out_h, out_w);
  for (int b = 0; b < in.batch; ++b) {
    for (int co = 0; co < p.out_channels; ++co) {
      for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
          S acc = p.bias[co];
          for (int ci = 0; ci < p.in_channels; ++ci) {
            for (int ky = 0; ky < p.kh; ++ky) {
              for (int kx = 0; kx < p.kw; ++kx) {
                const int iy = oy * p.stride - p.pad_h + ky;
                const int ix = ox * p.stride - p.pad_w + kx;
                if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width) continue;
                acc += p.w(co, ci, ky, kx) * in(b, ci, iy, ix);
              }
            }
          }
          out(b, co, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

template <typename S>
mtn::Tensor4<S> naive_transposed_conv2d(const mtn::Tensor4<S>& in,
                                        const mtn::ConvParams<S>& p) {
  const int out_h = (in.height - 1) * p.stride - 2 * p.pad_h + p.kh;
  const int out_w = (in.width - 1) * p.stride - 2 * p.pad_w + p.kw;
  mtn::Tensor4<S> out(in.batch, p.out_channels, out_h, out_w);
  for (int b = 0; b < in.batch; ++b) {
    for (int co = 0; co < p.out_channels; ++co) {
      for (int iy = 0; iy < in.height; ++iy) {
        for (int ix = 0; ix < in.width; ++ix) {
          for (int ci = 0; ci < p.in_channels; ++ci) {
            for (int ky = 0; ky < p.kh; ++ky) {
              for (int kx = 0; kx < p.kw; ++kx) {
                const int oy = iy * p.stride - p.pad_h + ky;
                const int ox = ix * p.stride - p.pad_w + kx;
                if (oy < 0 || oy >= out_h || ox < 0 || ox >= out_w) continue;
                out(b, co, oy, ox) += p.w(co, ci, ky, kx) * in(b, ci, iy, ix);
              }
            }
          }
        }
      }
      for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) out(b, co, oy, ox) += p.bias[co];
      }
    }
  }
  return out;
}

// Direct summation of the windowed correlation (Eq.-style definition):
// offsets where either patch position leaves its grid contribute zero.
template <typename S>
S direct_correlation(const mtn::Tensor4<S>& ref, const mtn::Tensor4<S>& tgt, int rx,
                     int ry, int tx, int ty, int window) {
  S acc = S(0);
  for (int oy = -window; oy <= window; ++oy) {
    for (int ox = -window; ox <= window; ++ox) {
      const int ay = ry + oy, ax = rx + ox, by = ty + oy, bx = tx + ox;
      if (ay < 0 || ay >= ref.height || ax < 0 || ax >= ref.width) continue;
      if (by < 0 || by >= tgt.height || bx < 0 || bx >= tgt.width) continue;
      for (int c = 0; c < ref.channels; ++c) {
        acc += ref(0, c, ay, ax) * tgt(0, c, by, bx);
      }
    }
  }
  return acc;
}

// Brute-force 2-D argmax over all offsets, scanning dy then dx ascending
// (= ascending flat index h), keeping the first maximum.
template <typename S>
void argmax_displacement(const mtn::CorrelationVolume<S>& vol, int x, int y,
                         int& best_dx, int& best_dy, S& best_score) {
  bool found = false;
  for (int dy = -vol.d_m; dy <= vol.d_m; ++dy) {
    for (int dx = -vol.d_m; dx <= vol.d_m; ++dx) {
      const int h_idx = (dy + vol.d_m) * vol.patch_extent() + (dx + vol.d_m);
      const S s = vol.score_at(x, y, h_idx);
      if (s == mtn::CorrelationVolume<S>::sentinel()) continue;
      if (!found || s > best_score) {
        found = true;
        best_score = s;
        best_dx = dx;
        best_dy = dy;
      }
    }
  }
}

}  // namespace oracles
