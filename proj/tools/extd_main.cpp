// extd: command-line front end (summarize, train, detect, eval, gradcheck,
// synth, bench). Exit status: 0 success, 1 usage error, 2 data error.

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include "extd/cost.hpp"
#include "extd/detect.hpp"
#include "extd/io.hpp"
#include "extd/train.hpp"

namespace fs = std::filesystem;
using namespace extd;

namespace {

int summarize(const std::string& config_path, int size, bool elementwise, bool machine) {
  const ModelConfig cfg = load_config(config_path);
  const auto report = count_madds(cfg, size, size, {elementwise});
  std::cout << (machine ? report.lines() : report.table());
  return 0;
}

struct TrainArgs {
  std::string config, data, out, trace;
  long iters = 2000;
  int batch = 8;
  double lr = 1e-2;
  long warmup = 100;
  std::vector<std::string> drops;
  int resolution = 128;
  std::uint64_t seed = 0;
  bool no_augment = false;
};

int train(const TrainArgs& a) {
  const ModelConfig cfg = load_config(a.config);
  const auto data = load_dataset(a.data);
  TrainOptions o;
  o.schedule.base_lr = a.lr;
  o.schedule.total_iters = a.iters;
  o.schedule.batch_size = a.batch;
  o.schedule.warmup_iters = a.warmup;
  o.schedule.drops.clear();
  for (const auto& d : a.drops) {
    const auto colon = d.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("--drop expects ITER:LR, got '" + d + "'");
    o.schedule.drops.emplace_back(std::stol(d.substr(0, colon)), std::stod(d.substr(colon + 1)));
  }
  o.resolution = a.resolution;
  o.use_augment = !a.no_augment;
  o.seed = a.seed;

  std::ofstream trace_file;
  if (!a.trace.empty()) {
    trace_file.open(a.trace, std::ios::trunc);
    if (!trace_file) throw DataError("cannot write '" + a.trace + "'");
  }
  std::ostream& trace = a.trace.empty() ? std::cout : trace_file;
  const auto result = train_loop(cfg, o, data, [&](const TraceRow& r) { trace << format_trace_row(r) << '\n'; });
  save_weights(a.out, result.params);
  return 0;
}

int detect_cmd(const std::string& config_path, const std::string& weights, const std::vector<std::string>& images,
               const DetectOptions& opts, const std::string& out) {
  const ModelConfig cfg = load_config(config_path);
  const auto params = load_weights<float>(weights);
  check_weights(params, cfg);
  std::vector<ImageDetections> all;
  for (const auto& path : images) all.push_back({path, detect(params, cfg, load_image(path), opts)});
  write_file(out, format_detections(all));
  return 0;
}

int eval_cmd(const std::string& pred_path, const std::string& gt_path, double iou_thresh, const std::string& pr_out) {
  const auto preds = parse_detections(read_file(pred_path));
  const auto gt = load_annotations(gt_path);
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < gt.entries.size(); ++i) slot.emplace(gt.entries[i].path, i);
  std::vector<std::vector<Detection>> dets(gt.entries.size());
  std::vector<std::vector<Box>> boxes;
  for (const auto& e : gt.entries) boxes.push_back(e.boxes);
  for (const auto& p : preds) {
    auto it = slot.find(p.id);
    if (it == slot.end()) {
      // Detection files may name images by full path; fall back to the file name.
      it = slot.find(fs::path(p.id).filename().string());
    }
    if (it == slot.end()) throw DataError("detections for '" + p.id + "' have no ground truth entry");
    auto& d = dets[it->second];
    d.insert(d.end(), p.dets.begin(), p.dets.end());
  }
  const auto r = average_precision(dets, boxes, iou_thresh);
  std::printf("AP %.4f\n", r.ap);
  std::printf("tp %ld fp %ld fn %ld (score >= 0.5)\n", r.tp, r.fp, r.fn);
  if (!pr_out.empty()) write_file(pr_out, format_pr(r.pr));
  return 0;
}

int gradcheck_cmd(const std::string& config_path, std::uint64_t seed) {
  const ModelConfig cfg = load_config(config_path);
  GradCheckOptions o;
  o.input_size = std::max(64, cfg.size_multiple());
  const auto rep = grad_check(cfg, seed, o);
  for (const auto& e : rep.entries) {
    std::printf("%-32s %3d %.3e %.3e\n", e.name.c_str(), e.checked, e.max_rel_err, e.max_abs_grad);
  }
  const bool ok = rep.max_rel_err < 1e-3;
  std::printf("max_rel_err %.3e over %zu tensors: %s\n", rep.max_rel_err, rep.entries.size(), ok ? "PASS" : "FAIL");
  return ok ? 0 : 2;
}

int synth_cmd(const std::string& out, int count, int resolution, std::uint64_t seed) {
  const auto index = synth_generate(count, resolution, seed, out);
  std::size_t faces = 0;
  for (const auto& e : index.entries) faces += e.boxes.size();
  std::printf("wrote %zu images with %zu faces to %s\n", index.entries.size(), faces, out.c_str());
  return 0;
}

int bench_cmd(const std::string& config_path, const std::string& weights, const std::vector<int>& sizes,
              int trials) {
  const ModelConfig cfg = load_config(config_path);
  const auto params = weights.empty() ? build_model<float>(cfg, cfg.seed) : load_weights<float>(weights);
  check_weights(params, cfg);
  std::printf("%8s %8s %12s %12s\n", "size", "trials", "mean_ms", "std_ms");
  for (const auto& r : bench(params, cfg, sizes, trials)) {
    std::printf("%8d %8d %12.3f %12.3f\n", r.size, r.trials, r.mean_ms, r.std_ms);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef M_MMAP_THRESHOLD
  // Keep freed activation buffers in the heap instead of returning them to the OS.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"EXTD face detector toolkit"};
  app.require_subcommand(1);

  std::string config, weights, out, data, pred, gt, pr_out;
  int size = 640;
  bool elementwise = false, machine = false;
  auto* s_sum = app.add_subcommand("summarize", "Parameter and multiply-add report");
  s_sum->add_option("--config", config, "Model config file")->required();
  s_sum->add_option("--input-size", size, "Square input side")->check(CLI::PositiveNumber);
  s_sum->add_flag("--elementwise", elementwise, "Also count BN, activations, upsampling, adds");
  s_sum->add_flag("--machine", machine, "Print `name params madds_per_pass passes total` lines");

  TrainArgs ta;
  auto* s_train = app.add_subcommand("train", "Train on an annotated dataset");
  s_train->add_option("--config", ta.config)->required();
  s_train->add_option("--data", ta.data, "Annotation file (image paths relative to it)")->required();
  s_train->add_option("--out", ta.out, "Weight file to write")->required();
  s_train->add_option("--iters", ta.iters)->check(CLI::PositiveNumber);
  s_train->add_option("--batch", ta.batch)->check(CLI::PositiveNumber);
  s_train->add_option("--lr", ta.lr)->check(CLI::PositiveNumber);
  s_train->add_option("--warmup", ta.warmup, "Linear warm-up iterations")->check(CLI::NonNegativeNumber);
  s_train->add_option("--drop", ta.drops, "Learning-rate drop ITER:LR (repeatable)");
  s_train->add_option("--resolution", ta.resolution)->check(CLI::PositiveNumber);
  s_train->add_option("--seed", ta.seed);
  s_train->add_option("--trace", ta.trace, "Loss trace file (default stdout)");
  s_train->add_flag("--no-augment", ta.no_augment, "Resize only, no random crops/flips/colour");

  std::vector<std::string> images;
  DetectOptions dopt;
  auto* s_det = app.add_subcommand("detect", "Detect faces in PPM/PGM images");
  s_det->add_option("--config", config)->required();
  s_det->add_option("--weights", weights)->required();
  s_det->add_option("--image", images, "Image file (repeatable)")->required();
  s_det->add_option("--conf", dopt.conf)->check(CLI::Range(0.0, 1.0));
  s_det->add_option("--nms", dopt.nms_iou)->check(CLI::Range(0.0, 1.0));
  s_det->add_option("--topk", dopt.topk)->check(CLI::NonNegativeNumber);
  s_det->add_option("--out", out, "Detection file to write")->required();

  double iou = 0.5;
  auto* s_eval = app.add_subcommand("eval", "Average precision of a detection file");
  s_eval->add_option("--pred", pred)->required();
  s_eval->add_option("--gt", gt)->required();
  s_eval->add_option("--iou", iou)->check(CLI::Range(0.0, 1.0));
  s_eval->add_option("--pr", pr_out, "Write the 1000-threshold PR curve here");

  std::uint64_t seed = 0;
  auto* s_gc = app.add_subcommand("gradcheck", "Loss gradient vs central differences");
  s_gc->add_option("--config", config)->required();
  s_gc->add_option("--seed", seed);

  int count = 0, resolution = 128;
  auto* s_syn = app.add_subcommand("synth", "Generate a synthetic face dataset");
  s_syn->add_option("--out", out)->required();
  s_syn->add_option("--count", count)->required()->check(CLI::NonNegativeNumber);
  s_syn->add_option("--resolution", resolution)->check(CLI::Range(32, 4096));
  s_syn->add_option("--seed", seed);

  std::vector<int> sizes;
  int trials = 1000;
  auto* s_bench = app.add_subcommand("bench", "Forward latency per input size");
  s_bench->add_option("--config", config)->required();
  s_bench->add_option("--weights", weights, "Weight file (default: fresh initialisation)");
  s_bench->add_option("--sizes", sizes)->required()->delimiter(',');
  s_bench->add_option("--trials", trials)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 1;
  }

  try {
    if (*s_sum) return summarize(config, size, elementwise, machine);
    if (*s_train) return train(ta);
    if (*s_det) return detect_cmd(config, weights, images, dopt, out);
    if (*s_eval) return eval_cmd(pred, gt, iou, pr_out);
    if (*s_gc) return gradcheck_cmd(config, seed);
    if (*s_syn) return synth_cmd(out, count, resolution, seed);
    if (*s_bench) return bench_cmd(config, weights, sizes, trials);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
