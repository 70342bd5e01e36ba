// Command-line front end: train, segment, evaluate, benchmark.
#include <CLI11.hpp>

#include <mtn/io.hpp>
#include <mtn/metrics.hpp>
#include <mtn/pipeline.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::string frame_name(int number, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d%s", number, ext);
  return buf;
}

std::vector<std::pair<int, fs::path>> numbered_pgms(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw mtn::IoError(dir.string() + ": not a directory");
  std::vector<std::pair<int, fs::path>> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".pgm") continue;
    const std::string stem = entry.path().stem().string();
    try {
      out.emplace_back(std::stoi(stem), entry.path());
    } catch (const std::exception&) {
      continue;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<mtn::TrainingSample<float>> load_sample_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw mtn::IoError(dir.string() + ": not a directory");
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
      images.push_back(entry.path());
    }
  }
  std::sort(images.begin(), images.end());
  std::vector<mtn::TrainingSample<float>> samples;
  for (const auto& image_path : images) {
    fs::path mask_path = image_path;
    mask_path.replace_extension(".pgm");
    if (!fs::is_regular_file(mask_path)) {
      throw mtn::IoError(mask_path.string() + ": missing mask for " + image_path.string());
    }
    mtn::TrainingSample<float> sample;
    sample.image = mtn::read_ppm(image_path);
    mtn::LabelImage labels = mtn::read_pgm(mask_path);
    sample.mask = mtn::Tensor4f(1, 1, labels.height, labels.width);
    for (int y = 0; y < labels.height; ++y) {
      for (int x = 0; x < labels.width; ++x) {
        sample.mask(0, 0, y, x) = labels.at(y, x) > 0 ? 1.0f : 0.0f;
      }
    }
    sample.provenance = mtn::SampleProvenance::kLoaded;
    sample.validate();
    samples.push_back(std::move(sample));
  }
  if (samples.empty()) throw mtn::IoError(dir.string() + ": no .ppm/.pgm sample pairs");
  return samples;
}

int cmd_train(const fs::path& config_path, const fs::path& out_path,
              std::optional<std::uint32_t> seed, const std::string& data_dir,
              int synthetic_count) {
  mtn::RunConfig cfg = mtn::parse_config(config_path);
  if (seed) cfg.train.seed = *seed;

  std::vector<mtn::TrainingSample<float>> samples;
  if (!data_dir.empty()) {
    samples = load_sample_dir(data_dir);
  } else {
    std::mt19937 rng(cfg.train.seed ^ 0xa5a5a5a5u);
    const int sample_size = cfg.train.patch + cfg.train.patch / 4;
    for (int i = 0; i < synthetic_count; ++i) {
      samples.push_back(mtn::generate_synthetic_sample<float>(rng, sample_size));
    }
  }

  mtn::TrainResult<float> result;
  if (cfg.train.double_precision) {
    std::vector<mtn::TrainingSample<double>> dsamples;
    for (const auto& s : samples) {
      dsamples.push_back({s.image.cast<double>(), s.mask.cast<double>(), s.provenance});
    }
    mtn::TrainResult<double> dres = mtn::train(dsamples, cfg.train, cfg.model);
    result.params = dres.params.cast<float>();
    result.loss_trace = std::move(dres.loss_trace);
  } else {
    result = mtn::train(samples, cfg.train, cfg.model);
  }

  mtn::save_model(result.params, out_path);
  fs::path trace_path = out_path;
  trace_path += ".loss.txt";
  std::ofstream trace(trace_path);
  if (!trace) throw mtn::IoError(trace_path.string() + ": cannot write loss trace");
  trace << "iteration loss\n";
  for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
    trace << i << " " << result.loss_trace[i] << "\n";
  }

  const double final_loss = result.loss_trace.back();
  std::cout << "trained " << cfg.train.iterations << " iterations on " << samples.size()
            << " samples; final loss " << final_loss << "\n";
  std::cout << "model: " << out_path.string() << "\n";
  std::cout << "loss trace: " << trace_path.string() << "\n";
  return kExitOk;
}

int cmd_segment(const fs::path& model_path, const fs::path& seq_dir, const fs::path& out_dir,
                const std::string& warp) {
  mtn::ModelParameters<float> model = mtn::load_model(model_path);
  mtn::SequenceBundle seq = mtn::load_sequence(seq_dir);
  mtn::ForwardOptions options;
  options.warp = warp == "gather" ? mtn::WarpMode::kGather : mtn::WarpMode::kScatter;

  fs::create_directories(out_dir);
  // the reference mask is given, not predicted: copy it through
  mtn::write_pgm(seq.reference_mask, out_dir / frame_name(seq.frame_numbers.front(), ".pgm"));

  for (std::size_t i = 1; i < seq.frames.size(); ++i) {
    std::vector<mtn::Tensor4f> probs;
    for (int m = 1; m <= seq.object_count; ++m) {
      mtn::Tensor4f ref_mask = mtn::binary_mask_tensor<float>(seq.reference_mask, m);
      probs.push_back(mtn::forward(seq.frames.front(), ref_mask, seq.frames[i], model, options));
    }
    mtn::LabelImage fused =
        mtn::fuse_multi_object(mtn::ObjectProbabilitySet<float>::from_objects(std::move(probs)));
    mtn::write_pgm(fused, out_dir / frame_name(seq.frame_numbers[i], ".pgm"));
  }
  std::cout << "segmented " << seq.frames.size() - 1 << " frames (" << seq.object_count
            << " objects) into " << out_dir.string() << "\n";
  return kExitOk;
}

int cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir, const fs::path& report_path) {
  auto pred_files = numbered_pgms(pred_dir);
  auto gt_files = numbered_pgms(gt_dir);
  std::erase_if(pred_files, [](const auto& p) { return p.first == 0; });
  std::erase_if(gt_files, [](const auto& p) { return p.first == 0; });
  if (pred_files.size() != gt_files.size()) {
    throw mtn::IoError("frame count mismatch: " + std::to_string(pred_files.size()) +
                       " predictions vs " + std::to_string(gt_files.size()) + " ground truths");
  }
  for (std::size_t i = 0; i < pred_files.size(); ++i) {
    if (pred_files[i].first != gt_files[i].first) {
      throw mtn::IoError("frame numbering mismatch at " + pred_files[i].second.string());
    }
  }
  if (pred_files.empty()) throw mtn::IoError(pred_dir.string() + ": nothing to score");

  std::vector<mtn::LabelImage> preds, gts;
  int num_objects = 0;
  for (std::size_t i = 0; i < pred_files.size(); ++i) {
    preds.push_back(mtn::read_pgm(pred_files[i].second));
    gts.push_back(mtn::read_pgm(gt_files[i].second));
    num_objects = std::max(num_objects, gts.back().max_label());
  }
  if (num_objects == 0) throw mtn::IoError(gt_dir.string() + ": ground truth has no objects");

  mtn::EvalReport report;
  mtn::SequenceScore score;
  score.name = pred_dir.filename().empty() ? pred_dir.string() : pred_dir.filename().string();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    mtn::FrameScore fr = mtn::score_frame(preds[i], gts[i], num_objects);
    fr.frame_number = pred_files[i].first;
    score.frames.push_back(fr);
  }
  report.sequences.push_back(std::move(score));
  report.finalize();

  std::ofstream out(report_path);
  if (!out) throw mtn::IoError(report_path.string() + ": cannot write report");
  out << report.to_text();
  std::cout << "scored " << report.frames_scored() << " frames: J mean " << report.j_mean
            << ", F mean " << report.f_mean << ", J&F mean " << report.jf_mean << "\n";
  std::cout << "report: " << report_path.string() << "\n";
  return kExitOk;
}

int cmd_bench(const fs::path& model_path, const std::string& size, int repeats,
              bool parallel_matching) {
  int w = 0, h = 0;
  if (std::sscanf(size.c_str(), "%dx%d", &w, &h) != 2 || w < 1 || h < 1) {
    throw CLI::ValidationError("--size", "expected WxH, e.g. 256x256");
  }
  mtn::ModelParameters<float> model = mtn::load_model(model_path);
  mtn::StageTimings t = mtn::profile_pipeline(model, h, w, repeats, parallel_matching);

  std::printf("input %dx%d, %d repeats (median), single thread\n", w, h, t.repeats);
  std::printf("%-24s %10s\n", "stage", "time_ms");
  std::printf("%-24s %10.3f\n", "image encoder", t.image_encoder_ms);
  std::printf("%-24s %10.3f\n", "mask encoder", t.mask_encoder_ms);
  std::printf("%-24s %10.3f\n", "pixel matching", t.pixel_matching_ms);
  std::printf("%-24s %10.3f\n", "bottom-up decoder", t.decoder_ms);
  std::printf("%-24s %10.3f\n", "total", t.total_ms);
  if (t.matching_parallel_ms >= 0) {
    std::printf("%-24s %10.3f\n", "pixel matching (parallel)", t.matching_parallel_ms);
  }
  std::printf("fps %.2f\n", t.fps());

  // quadratic-cost check of global matching: double the grid, expect the
  // time to grow by far more than the pixel count
  const int e = model.config.embed_channels;
  const double small = mtn::time_global_correlation(8, e, std::max(repeats, 9));
  const double big = mtn::time_global_correlation(16, e, std::max(repeats, 9));
  std::printf("matching scaling 8x8 -> 16x16 grid: %.1fx\n", big / small);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mask-transfer video object segmentation"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model on image/mask samples");
  std::string train_config, train_out, train_data;
  int synthetic_count = 50;
  std::uint32_t seed_value = 0;
  bool seed_given = false;
  train->add_option("--config", train_config, "training config (JSON)")->required();
  train->add_option("--out", train_out, "output model path")->required();
  auto* seed_opt = train->add_option("--seed", seed_value, "override the config seed");
  auto* data_opt = train->add_option("--data", train_data, "directory of .ppm/.pgm sample pairs");
  train->add_option("--synthetic", synthetic_count, "number of generated synthetic samples")
      ->excludes(data_opt);

  auto* segment = app.add_subcommand("segment", "segment a sequence from its reference mask");
  std::string seg_model, seg_seq, seg_out, seg_warp = "scatter";
  segment->add_option("--model", seg_model, "model file")->required();
  segment->add_option("--seq", seg_seq, "sequence directory (frames/ + masks/)")->required();
  segment->add_option("--out", seg_out, "output directory for predicted masks")->required();
  segment->add_option("--warp", seg_warp, "mask transfer mode")
      ->check(CLI::IsMember({"scatter", "gather"}));

  auto* eval = app.add_subcommand("eval", "score predicted masks against ground truth");
  std::string eval_pred, eval_gt, eval_report;
  eval->add_option("--pred", eval_pred, "directory of predicted masks")->required();
  eval->add_option("--gt", eval_gt, "directory of ground-truth masks")->required();
  eval->add_option("--report", eval_report, "report output path")->required();

  auto* bench = app.add_subcommand("bench", "profile the pipeline stages");
  std::string bench_model, bench_size = "256x256";
  int bench_repeats = 5;
  bool bench_parallel = false;
  bench->add_option("--model", bench_model, "model file")->required();
  bench->add_option("--size", bench_size, "frame size WxH");
  bench->add_option("--repeats", bench_repeats, "timing repeats (median)")
      ->check(CLI::Range(3, 1000));
  bench->add_flag("--parallel-matching", bench_parallel,
                  "also time the row-parallel matching path");

  try {
    app.parse(argc, argv);
    seed_given = seed_opt->count() > 0;
    if (train->parsed()) {
      return cmd_train(train_config, train_out,
                       seed_given ? std::optional<std::uint32_t>(seed_value) : std::nullopt,
                       train_data, synthetic_count);
    }
    if (segment->parsed()) return cmd_segment(seg_model, seg_seq, seg_out, seg_warp);
    if (eval->parsed()) return cmd_eval(eval_pred, eval_gt, eval_report);
    if (bench->parsed()) return cmd_bench(bench_model, bench_size, bench_repeats, bench_parallel);
    return kExitUsage;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const mtn::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const mtn::IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}
