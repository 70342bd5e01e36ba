#include "mtn/metrics.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

namespace mtn {

namespace {

void require_binary(const LabelImage& mask, const char* who) {
  for (auto v : mask.labels) {
    require(v <= 1, std::string(who) + ": expected a binary mask");
  }
}

// Boundary pixels: foreground with a background 4-neighbour; pixels past
// the image border count as background.
std::vector<std::uint8_t> boundary_map(const LabelImage& mask) {
  std::vector<std::uint8_t> out(mask.labels.size(), 0);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      const bool edge = y == 0 || y == mask.height - 1 || x == 0 || x == mask.width - 1 ||
                        !mask.at(y - 1, x) || !mask.at(y + 1, x) || !mask.at(y, x - 1) ||
                        !mask.at(y, x + 1);
      if (edge) out[static_cast<std::size_t>(y) * mask.width + x] = 1;
    }
  }
  return out;
}

std::vector<std::uint8_t> dilate_disk(const std::vector<std::uint8_t>& src, int h, int w,
                                      int radius) {
  std::vector<std::pair<int, int>> offsets;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) offsets.emplace_back(dy, dx);
    }
  }
  std::vector<std::uint8_t> out(src.size(), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!src[static_cast<std::size_t>(y) * w + x]) continue;
      for (const auto& [dy, dx] : offsets) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < h && xx >= 0 && xx < w) {
          out[static_cast<std::size_t>(yy) * w + xx] = 1;
        }
      }
    }
  }
  return out;
}

}  // namespace

double jaccard(const LabelImage& pred, const LabelImage& gt) {
  require(pred.same_shape(gt), "jaccard: mask size mismatch");
  require_binary(pred, "jaccard");
  require_binary(gt, "jaccard");
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool a = pred.labels[i] != 0, b = gt.labels[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  if (uni == 0) return 1.0;  // both empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double boundary_f(const LabelImage& pred, const LabelImage& gt, double tol_fraction) {
  require(pred.same_shape(gt), "boundary_f: mask size mismatch");
  require(tol_fraction > 0 && tol_fraction <= 0.1,
          "boundary_f: tolerance fraction must be in (0, 0.1]");
  require_binary(pred, "boundary_f");
  require_binary(gt, "boundary_f");

  const auto pred_b = boundary_map(pred);
  const auto gt_b = boundary_map(gt);
  const long pred_count = std::count(pred_b.begin(), pred_b.end(), 1);
  const long gt_count = std::count(gt_b.begin(), gt_b.end(), 1);
  if (pred_count == 0 && gt_count == 0) return 1.0;
  if (pred_count == 0 || gt_count == 0) return 0.0;

  const double diag = std::hypot(pred.height, pred.width);
  const int radius = static_cast<int>(std::ceil(tol_fraction * diag));
  const auto gt_dil = dilate_disk(gt_b, gt.height, gt.width, radius);
  const auto pred_dil = dilate_disk(pred_b, pred.height, pred.width, radius);

  long pred_hit = 0, gt_hit = 0;
  for (std::size_t i = 0; i < pred_b.size(); ++i) {
    pred_hit += pred_b[i] && gt_dil[i];
    gt_hit += gt_b[i] && pred_dil[i];
  }
  const double precision = static_cast<double>(pred_hit) / static_cast<double>(pred_count);
  const double recall = static_cast<double>(gt_hit) / static_cast<double>(gt_count);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

FrameScore score_frame(const LabelImage& pred, const LabelImage& gt, int num_objects) {
  require(num_objects >= 1, "score_frame: need at least one object");
  FrameScore score;
  for (int m = 1; m <= num_objects; ++m) {
    LabelImage pred_m(pred.height, pred.width), gt_m(gt.height, gt.width);
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
      pred_m.labels[i] = pred.labels[i] == m;
      gt_m.labels[i] = gt.labels[i] == m;
    }
    score.j += jaccard(pred_m, gt_m);
    score.f += boundary_f(pred_m, gt_m);
  }
  score.j /= num_objects;
  score.f /= num_objects;
  return score;
}

void SequenceScore::finalize() {
  j_mean = f_mean = 0.0;
  for (const auto& fr : frames) {
    j_mean += fr.j;
    f_mean += fr.f;
  }
  if (!frames.empty()) {
    j_mean /= static_cast<double>(frames.size());
    f_mean /= static_cast<double>(frames.size());
  }
  jf_mean = (j_mean + f_mean) / 2.0;
}

int EvalReport::frames_scored() const {
  int n = 0;
  for (const auto& s : sequences) n += static_cast<int>(s.frames.size());
  return n;
}

void EvalReport::finalize() {
  j_mean = f_mean = 0.0;
  for (auto& s : sequences) s.finalize();
  const int n = frames_scored();
  if (n > 0) {
    for (const auto& s : sequences) {
      for (const auto& fr : s.frames) {
        j_mean += fr.j;
        f_mean += fr.f;
      }
    }
    j_mean /= n;
    f_mean /= n;
  }
  jf_mean = (j_mean + f_mean) / 2.0;
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(6);
  out << "evaluation report\n";
  out << "sequences " << sequences.size() << "\n";
  out << "frames_scored " << frames_scored() << "\n";
  for (const auto& s : sequences) {
    out << "\nsequence " << s.name << "\n";
    out << "frame J F\n";
    for (const auto& fr : s.frames) {
      char name[8];
      std::snprintf(name, sizeof(name), "%05d", fr.frame_number);
      out << name << " " << fr.j << " " << fr.f << "\n";
    }
    out << "sequence_means " << s.name << " J " << s.j_mean << " F " << s.f_mean
        << " JF " << s.jf_mean << "\n";
  }
  out << "\nglobal J_mean " << j_mean << "\n";
  out << "global F_mean " << f_mean << "\n";
  out << "global JF_mean " << jf_mean << "\n";
  return out.str();
}

EvalReport evaluate_sequence(const SequenceBundle& seq, const ModelParameters<float>& params,
                             const ForwardOptions& options) {
  seq.validate();
  const Tensor4f& ref_frame = seq.frames.front();

  EvalReport report;
  SequenceScore score;
  score.name = "sequence";
  for (std::size_t i = 1; i < seq.frames.size(); ++i) {
    if (!seq.ground_truth[i]) continue;
    std::vector<Tensor4f> probs;
    for (int m = 1; m <= seq.object_count; ++m) {
      Tensor4f ref_mask = binary_mask_tensor<float>(seq.reference_mask, m);
      probs.push_back(forward(ref_frame, ref_mask, seq.frames[i], params, options));
    }
    const LabelImage pred = fuse_multi_object(ObjectProbabilitySet<float>::from_objects(std::move(probs)));
    FrameScore fr = score_frame(pred, *seq.ground_truth[i], seq.object_count);
    fr.frame_number = seq.frame_numbers[i];
    score.frames.push_back(fr);
  }
  report.sequences.push_back(std::move(score));
  report.finalize();
  return report;
}

// ---------------------------------------------------------------------------
// Profiling

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename Fn>
double time_median_ms(int repeats, Fn&& fn) {
  fn();  // warm-up, discarded
  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = Clock::now();
    fn();
    const auto t1 = Clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return median(std::move(samples));
}

Tensor4f random_frame(std::mt19937& rng, int h, int w) {
  Tensor4f frame(1, 3, h, w);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  for (Eigen::Index i = 0; i < frame.data.size(); ++i) frame.data[i] = unit(rng);
  return frame;
}

Tensor4f disk_mask(int h, int w) {
  Tensor4f mask(1, 1, h, w);
  const double cy = h / 2.0, cx = w / 2.0, r = std::min(h, w) / 4.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) mask(0, 0, y, x) = 1.0f;
    }
  }
  return mask;
}

}  // namespace

StageTimings profile_pipeline(const ModelParameters<float>& params, int frame_h,
                              int frame_w, int repeats, bool parallel_matching) {
  require(repeats >= 3, "profile_pipeline: need at least 3 repeats");
  params.validate();
  const int s = params.config.total_stride;
  require(frame_h % s == 0 && frame_w % s == 0,
          "profile_pipeline: frame size must be divisible by the total stride");

  std::mt19937 rng(42);
  const Tensor4f ref = random_frame(rng, frame_h, frame_w);
  const Tensor4f tgt = random_frame(rng, frame_h, frame_w);
  const Tensor4f mask = disk_mask(frame_h, frame_w);

  // Stage inputs computed once, outside the timed regions.
  const Tensor4f feats_ref = encode_image(ref, params);
  const Tensor4f feats_tgt = encode_image(tgt, params);
  const Tensor4f emb_ref = embed(feats_ref, params);
  const Tensor4f emb_tgt = embed(feats_tgt, params);
  const Tensor4f mask_feats = encode_mask(mask, params);
  const CorrelationVolume<float> volume = global_correlation(emb_ref, emb_tgt);
  const DisplacementField<float> field = decode_displacement(volume);
  const Tensor4f warped = warp_mask_features(mask_feats, field);

  StageTimings t;
  t.repeats = repeats;
  t.frame_h = frame_h;
  t.frame_w = frame_w;
  t.image_encoder_ms = time_median_ms(repeats, [&] { encode_image(tgt, params); });
  t.mask_encoder_ms = time_median_ms(repeats, [&] { encode_mask(mask, params); });
  t.pixel_matching_ms = time_median_ms(repeats, [&] {
    const auto vol = global_correlation(emb_ref, emb_tgt);
    const auto f = decode_displacement(vol);
    warp_mask_features(mask_feats, f);
  });
  if (parallel_matching) {
    t.matching_parallel_ms = time_median_ms(repeats, [&] {
      const auto vol = global_correlation(emb_ref, emb_tgt, 0, true);
      const auto f = decode_displacement(vol, true);
      warp_mask_features(mask_feats, f);
    });
  }
  t.decoder_ms = time_median_ms(repeats, [&] {
    const Tensor4f fine = bilinear_resize(tgt, frame_h / 4, frame_w / 4);
    decode(emb_tgt, warped, fine, params);
  });
  t.total_ms = time_median_ms(repeats, [&] { forward(ref, mask, tgt, params); });
  return t;
}

double time_global_correlation(int grid, int channels, int repeats, std::uint32_t seed) {
  require(grid >= 1 && channels >= 1 && repeats >= 3,
          "time_global_correlation: bad arguments");
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> unit(-1.0f, 1.0f);
  Tensor4f a(1, channels, grid, grid), b(1, channels, grid, grid);
  for (Eigen::Index i = 0; i < a.data.size(); ++i) a.data[i] = unit(rng);
  for (Eigen::Index i = 0; i < b.data.size(); ++i) b.data[i] = unit(rng);
  return time_median_ms(repeats, [&] { global_correlation(a, b); });
}

}  // namespace mtn
