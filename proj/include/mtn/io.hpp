#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mtn/blocks.hpp"
#include "mtn/pipeline.hpp"

namespace mtn {

/// File and format errors; the message carries the path and, for parse
/// failures, the byte or line position.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Binary P6, maxval 255; values come back scaled to [0,1].
Tensor4f read_ppm(const std::filesystem::path& path);
void write_ppm(const Tensor4f& image, const std::filesystem::path& path);

/// Binary P5, maxval 255; the raw pixel value is the object label.
LabelImage read_pgm(const std::filesystem::path& path);
void write_pgm(const LabelImage& mask, const std::filesystem::path& path);

/// DAVIS-style directory: frames/NNNNN.ppm (sorted numerically),
/// masks/00000.pgm as the annotated reference, optional masks/NNNNN.pgm
/// as per-frame ground truth.
struct SequenceBundle {
  std::vector<Tensor4f> frames;
  std::vector<int> frame_numbers;
  LabelImage reference_mask;
  std::vector<std::optional<LabelImage>> ground_truth;  // aligned with frames
  int object_count = 0;  // M = max label in the reference mask

  void validate() const;
};

SequenceBundle load_sequence(const std::filesystem::path& dir);

/// Model container: magic "MTN1", 4-byte little-endian header length, a
/// structured-text header describing the architecture and layer shapes,
/// then all parameters as little-endian 4-byte floats in header order.
void save_model(const ModelParameters<float>& model, const std::filesystem::path& path);
ModelParameters<float> load_model(const std::filesystem::path& path);

struct RunConfig {
  TrainConfig train;
  ModelConfig model;
};

/// Flat JSON key/value config; unknown keys are rejected, missing keys
/// fall back to the documented defaults. An empty document is all
/// defaults.
RunConfig parse_config(const std::filesystem::path& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin);

}  // namespace mtn
