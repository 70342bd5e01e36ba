#pragma once

#include <string>
#include <vector>

#include "mtn/io.hpp"
#include "mtn/pipeline.hpp"

namespace mtn {

/// Region similarity J: intersection over union of two binary masks.
/// Two empty masks count as a perfect match.
double jaccard(const LabelImage& pred, const LabelImage& gt);

/// Contour accuracy F: F-measure between the two masks' boundary pixel
/// sets under a spatial tolerance given as a fraction of the image
/// diagonal (matching via morphological dilation).
double boundary_f(const LabelImage& pred, const LabelImage& gt,
                  double tol_fraction = 0.008);

struct FrameScore {
  int frame_number = 0;
  double j = 0.0;
  double f = 0.0;
};

struct SequenceScore {
  std::string name;
  std::vector<FrameScore> frames;
  double j_mean = 0.0;
  double f_mean = 0.0;
  double jf_mean = 0.0;

  void finalize();
};

struct EvalReport {
  std::vector<SequenceScore> sequences;
  double j_mean = 0.0;
  double f_mean = 0.0;
  double jf_mean = 0.0;

  int frames_scored() const;
  void finalize();
  std::string to_text() const;
};

/// Mean-over-objects J and F of one predicted label map against ground
/// truth with objects 1..num_objects.
FrameScore score_frame(const LabelImage& pred, const LabelImage& gt, int num_objects);

/// Segments every non-reference frame of the bundle against the
/// reference and scores frames that carry ground truth. The reference
/// frame is given, not predicted, and is never scored.
EvalReport evaluate_sequence(const SequenceBundle& seq, const ModelParameters<float>& params,
                             const ForwardOptions& options = {});

/// Median-of-repeats wall times of the four pipeline stages plus an
/// independently measured full forward pass.
struct StageTimings {
  double image_encoder_ms = 0.0;
  double mask_encoder_ms = 0.0;
  double pixel_matching_ms = 0.0;
  double decoder_ms = 0.0;
  double matching_parallel_ms = -1.0;  // set only when profiled in parallel mode
  double total_ms = 0.0;
  int repeats = 0;
  int frame_h = 0;
  int frame_w = 0;

  double stage_sum_ms() const {
    return image_encoder_ms + mask_encoder_ms + pixel_matching_ms + decoder_ms;
  }
  double fps() const { return 1000.0 / total_ms; }
};

/// Times each stage in isolation on fixed random inputs; one warm-up
/// pass per stage is discarded and the median over `repeats` is kept.
/// With parallel_matching the row-parallel matching path is timed as
/// well and reported alongside the single-thread number.
StageTimings profile_pipeline(const ModelParameters<float>& params, int frame_h,
                              int frame_w, int repeats, bool parallel_matching = false);

/// Median wall time of global_correlation on an n x n grid with random
/// embeddings; used for the quadratic-cost scaling check.
double time_global_correlation(int grid, int channels, int repeats,
                               std::uint32_t seed = 7);

}  // namespace mtn
