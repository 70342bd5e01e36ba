#include "mtn/io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cstring>
#include <fstream>

namespace mtn {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

[[noreturn]] void fail(const fs::path& path, const std::string& what,
                       std::optional<std::size_t> offset = {}) {
  std::string msg = path.string() + ": " + what;
  if (offset) msg += " (byte " + std::to_string(*offset) + ")";
  throw IoError(msg);
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open file");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return bytes;
}

struct NetpbmHeader {
  int width = 0;
  int height = 0;
  std::size_t data_offset = 0;
};

// Common P5/P6 header: magic, optional '#' comments, width height maxval,
// one whitespace byte, then raw payload.
NetpbmHeader parse_netpbm_header(const fs::path& path, const std::vector<char>& bytes,
                                 const char* magic) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
    fail(path, std::string("expected magic \"") + magic + "\"", 0);
  }
  pos = 2;
  auto next_token = [&]() -> long {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size()) fail(path, "truncated header", pos);
    long value = 0;
    const auto* begin = bytes.data() + pos;
    const auto* end = bytes.data() + bytes.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr == begin) fail(path, "expected an integer", pos);
    pos += static_cast<std::size_t>(ptr - begin);
    return value;
  };

  NetpbmHeader header;
  const long w = next_token();
  const long h = next_token();
  const long maxval = next_token();
  if (w < 1 || h < 1) fail(path, "non-positive image dimensions", pos);
  if (maxval != 255) fail(path, "maxval must be 255, got " + std::to_string(maxval), pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    fail(path, "expected single whitespace before payload", pos);
  }
  header.width = static_cast<int>(w);
  header.height = static_cast<int>(h);
  header.data_offset = pos + 1;
  return header;
}

}  // namespace

Tensor4f read_ppm(const fs::path& path) {
  const std::vector<char> bytes = read_file(path);
  const NetpbmHeader h = parse_netpbm_header(path, bytes, "P6");
  const std::size_t need = static_cast<std::size_t>(h.width) * h.height * 3;
  if (bytes.size() - h.data_offset < need) {
    fail(path, "truncated pixel payload", bytes.size());
  }
  Tensor4f img(1, 3, h.height, h.width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.data_offset);
  for (int y = 0; y < h.height; ++y) {
    for (int x = 0; x < h.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        img(0, c, y, x) = static_cast<float>(*p++) / 255.0f;
      }
    }
  }
  return img;
}

void write_ppm(const Tensor4f& image, const fs::path& path) {
  require(image.batch == 1 && image.channels == 3, "write_ppm: expected one RGB image");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open file for writing");
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(image.width) * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image(0, c, y, x), 0.0f, 1.0f);
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) fail(path, "write failed");
}

LabelImage read_pgm(const fs::path& path) {
  const std::vector<char> bytes = read_file(path);
  const NetpbmHeader h = parse_netpbm_header(path, bytes, "P5");
  const std::size_t need = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() - h.data_offset < need) {
    fail(path, "truncated pixel payload", bytes.size());
  }
  LabelImage mask(h.height, h.width);
  std::memcpy(mask.labels.data(), bytes.data() + h.data_offset, need);
  return mask;
}

void write_pgm(const LabelImage& mask, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open file for writing");
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(mask.labels.data()),
            static_cast<std::streamsize>(mask.labels.size()));
  if (!out) fail(path, "write failed");
}

// ---------------------------------------------------------------------------
// Sequences

void SequenceBundle::validate() const {
  require(!frames.empty(), "SequenceBundle: no frames");
  require(frames.size() == ground_truth.size() && frames.size() == frame_numbers.size(),
          "SequenceBundle: inconsistent bookkeeping");
  for (const auto& f : frames) {
    require(f.height == frames.front().height && f.width == frames.front().width,
            "SequenceBundle: frames differ in size");
  }
  require(reference_mask.height == frames.front().height &&
              reference_mask.width == frames.front().width,
          "SequenceBundle: reference mask size mismatch");
  require(reference_mask.max_label() == object_count,
          "SequenceBundle: object count mismatch");
}

namespace {

std::vector<std::pair<int, fs::path>> numbered_files(const fs::path& dir,
                                                     const std::string& ext) {
  std::vector<std::pair<int, fs::path>> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ext) continue;
    const std::string stem = entry.path().stem().string();
    int number = 0;
    const auto [ptr, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), number);
    if (ec != std::errc() || ptr != stem.data() + stem.size()) continue;
    out.emplace_back(number, entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

SequenceBundle load_sequence(const fs::path& dir) {
  const fs::path frames_dir = dir / "frames";
  const fs::path masks_dir = dir / "masks";
  if (!fs::is_directory(frames_dir)) fail(frames_dir, "missing frames directory");
  const auto frame_files = numbered_files(frames_dir, ".ppm");
  if (frame_files.empty()) fail(frames_dir, "no numbered .ppm frames");

  const fs::path ref_path = masks_dir / "00000.pgm";
  if (!fs::is_regular_file(ref_path)) fail(ref_path, "missing reference mask");

  SequenceBundle bundle;
  bundle.reference_mask = read_pgm(ref_path);
  bundle.object_count = bundle.reference_mask.max_label();
  if (bundle.object_count < 1) fail(ref_path, "reference mask has no objects");

  for (const auto& [number, path] : frame_files) {
    bundle.frames.push_back(read_ppm(path));
    bundle.frame_numbers.push_back(number);
    char name[16];
    std::snprintf(name, sizeof(name), "%05d.pgm", number);
    const fs::path gt_path = masks_dir / name;
    if (number != frame_files.front().first && fs::is_regular_file(gt_path)) {
      LabelImage gt = read_pgm(gt_path);
      if (gt.max_label() > bundle.object_count) {
        fail(gt_path, "ground-truth label exceeds the reference object count");
      }
      bundle.ground_truth.emplace_back(std::move(gt));
    } else {
      bundle.ground_truth.emplace_back(std::nullopt);
    }
  }
  try {
    bundle.validate();
  } catch (const std::invalid_argument& e) {
    fail(dir, e.what());
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Model serialization

namespace {

constexpr char kMagic[4] = {'M', 'T', 'N', '1'};
constexpr int kFormatVersion = 1;

void append_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void append_f32le(std::string& out, float v) {
  append_u32le(out, std::bit_cast<std::uint32_t>(v));
}

std::uint32_t read_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

json layer_json(const std::string& name, const ConvParams<float>& p) {
  return json{{"name", name},     {"out", p.out_channels}, {"in", p.in_channels},
              {"kh", p.kh},       {"kw", p.kw},            {"stride", p.stride},
              {"pad_h", p.pad_h}, {"pad_w", p.pad_w}};
}

}  // namespace

void save_model(const ModelParameters<float>& model, const fs::path& path) {
  model.validate();
  json header;
  header["format_version"] = kFormatVersion;
  header["total_stride"] = model.config.total_stride;
  header["embed_channels"] = model.config.embed_channels;
  header["mask_channels"] = model.config.mask_channels;
  header["decoder_width"] = model.config.decoder_width;
  header["gcn_kernel"] = model.config.gcn_kernel;
  header["logit_scale"] = model.config.logit_scale;
  header["freeze_encoder"] = model.config.freeze_encoder;
  header["layers"] = json::array();
  std::int64_t count = 0;
  model.for_each_layer([&](const std::string& name, const ConvParams<float>& p) {
    header["layers"].push_back(layer_json(name, p));
    count += p.param_count();
  });
  header["param_count"] = count;

  std::string blob(kMagic, sizeof(kMagic));
  const std::string header_text = header.dump();
  append_u32le(blob, static_cast<std::uint32_t>(header_text.size()));
  blob += header_text;
  blob.reserve(blob.size() + static_cast<std::size_t>(count) * 4);
  model.for_each_layer([&](const std::string&, const ConvParams<float>& p) {
    for (Eigen::Index i = 0; i < p.weights.size(); ++i) append_f32le(blob, p.weights[i]);
    for (Eigen::Index i = 0; i < p.bias.size(); ++i) append_f32le(blob, p.bias[i]);
  });

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open file for writing");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) fail(path, "write failed");
}

ModelParameters<float> load_model(const fs::path& path) {
  const std::vector<char> bytes = read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(path, "bad magic, not a model file", 0);
  }
  const std::uint32_t header_len =
      read_u32le(reinterpret_cast<const unsigned char*>(bytes.data() + 4));
  if (bytes.size() < 8 + static_cast<std::size_t>(header_len)) {
    fail(path, "truncated header", bytes.size());
  }
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const json::exception& e) {
    fail(path, std::string("header is not valid JSON: ") + e.what(), 8);
  }
  if (header.value("format_version", -1) != kFormatVersion) {
    fail(path, "unsupported format version");
  }

  ModelConfig config;
  config.total_stride = header.at("total_stride").get<int>();
  config.embed_channels = header.at("embed_channels").get<int>();
  config.mask_channels = header.at("mask_channels").get<int>();
  config.decoder_width = header.at("decoder_width").get<int>();
  config.gcn_kernel = header.at("gcn_kernel").get<int>();
  config.logit_scale = header.at("logit_scale").get<double>();
  config.freeze_encoder = header.at("freeze_encoder").get<bool>();

  ModelParameters<float> model = init_model<float>(config, 0);
  json expected_layers = json::array();
  std::int64_t count = 0;
  model.for_each_layer([&](const std::string& name, const ConvParams<float>& p) {
    expected_layers.push_back(layer_json(name, p));
    count += p.param_count();
  });
  if (header.at("layers") != expected_layers) {
    fail(path, "layer table does not match the declared architecture");
  }
  if (header.at("param_count").get<std::int64_t>() != count) {
    fail(path, "declared parameter count does not match the architecture");
  }
  const std::size_t payload_off = 8 + header_len;
  if (bytes.size() - payload_off != static_cast<std::size_t>(count) * 4) {
    fail(path, "payload length does not match the declared parameter count",
         bytes.size());
  }

  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data() + payload_off);
  model.for_each_layer([&](const std::string&, ConvParams<float>& layer) {
    for (Eigen::Index i = 0; i < layer.weights.size(); ++i, p += 4) {
      layer.weights[i] = std::bit_cast<float>(read_u32le(p));
    }
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i, p += 4) {
      layer.bias[i] = std::bit_cast<float>(read_u32le(p));
    }
  });
  return model;
}

// ---------------------------------------------------------------------------
// Config

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  std::string trimmed = text;
  trimmed.erase(0, trimmed.find_first_not_of(" \t\r\n"));
  json doc;
  if (trimmed.empty()) {
    doc = json::object();
  } else {
    try {
      doc = json::parse(text);
    } catch (const json::exception& e) {
      throw IoError(origin + ": not valid JSON: " + e.what());
    }
  }
  if (!doc.is_object()) throw IoError(origin + ": config must be a flat JSON object");

  RunConfig cfg;
  ForwardOptions& fwd = cfg.train.forward;
  auto get = [&](const char* key, auto& slot) {
    if (auto it = doc.find(key); it != doc.end()) {
      try {
        slot = it->get<std::remove_reference_t<decltype(slot)>>();
      } catch (const json::exception&) {
        throw IoError(origin + ": key \"" + key + "\" has the wrong type");
      }
      doc.erase(it);
    }
  };

  get("seed", cfg.train.seed);
  get("lr", cfg.train.lr);
  get("fine_tune_lr", cfg.train.fine_tune_lr);
  get("iterations", cfg.train.iterations);
  get("fine_tune_iterations", cfg.train.fine_tune_iterations);
  get("patch", cfg.train.patch);
  get("flip_prob", cfg.train.flip_prob);
  get("brightness_delta", cfg.train.brightness_delta);
  get("contrast_min", cfg.train.contrast_min);
  get("contrast_max", cfg.train.contrast_max);
  get("scale_min", cfg.train.scale_min);
  get("scale_max", cfg.train.scale_max);
  get("rotation_deg", cfg.train.rotation_deg);
  get("translate_frac", cfg.train.translate_frac);
  get("soft_matching_grad", cfg.train.soft_matching_grad);
  get("soft_temperature", cfg.train.soft_temperature);
  get("window", fwd.window);
  get("total_stride", cfg.model.total_stride);
  get("embed_channels", cfg.model.embed_channels);
  get("mask_channels", cfg.model.mask_channels);
  get("decoder_width", cfg.model.decoder_width);
  get("gcn_kernel", cfg.model.gcn_kernel);
  get("logit_scale", cfg.model.logit_scale);
  get("freeze_encoder", cfg.model.freeze_encoder);

  std::string warp = "scatter";
  get("warp", warp);
  if (warp == "scatter") {
    fwd.warp = WarpMode::kScatter;
  } else if (warp == "gather") {
    fwd.warp = WarpMode::kGather;
  } else {
    throw IoError(origin + ": warp must be \"scatter\" or \"gather\"");
  }
  std::string precision = "single";
  get("precision", precision);
  if (precision == "double") {
    cfg.train.double_precision = true;
  } else if (precision != "single") {
    throw IoError(origin + ": precision must be \"single\" or \"double\"");
  }

  if (!doc.empty()) {
    throw IoError(origin + ": unknown key \"" + doc.begin().key() + "\"");
  }

  try {
    cfg.model.validate();
    cfg.train.validate(cfg.model);
    require(cfg.train.lr > 0, "lr must be > 0");
    require(fwd.window >= 0, "window must be >= 0");
  } catch (const std::invalid_argument& e) {
    throw IoError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig parse_config(const fs::path& path) {
  const std::vector<char> bytes = read_file(path);
  return parse_config_text(std::string(bytes.begin(), bytes.end()), path.string());
}

}  // namespace mtn
