#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "extd/augment.hpp"
#include "extd/loss.hpp"
#include "extd/model.hpp"
#include "extd/optim.hpp"

namespace extd {

struct TrainOptions {
  Schedule schedule;  // total_iters and batch_size drive the loop
  int resolution = 640;
  bool use_augment = true;
  AugmentConfig augment;  // resolution is overridden by `resolution`
  LossConfig loss;
  MatchConfig match;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
};

struct TraceRow {
  long iter = 0;  // 1-based
  double total = 0, cls = 0, reg = 0, lr = 0;
};

/// `iter total cls reg lr`, six significant digits.
std::string format_trace_row(const TraceRow& row);

struct TrainResult {
  ModelParams<float> params;
  std::vector<TraceRow> trace;
};

/// Stacks same-sized images into one batch tensor.
Tensor stack_images(const std::vector<const Tensor*>& images);

/// Runs matching and hard-negative mining for every image of a batch.
template <typename T>
std::vector<MatchAssignment> mined_assignments(const std::vector<HeadOutput<T>>& heads,
                                               const AnchorGrid& grid,
                                               const std::vector<std::vector<Box>>& boxes,
                                               const MatchConfig& match, const LossConfig& loss);

/// SGD training from a fresh He initialisation (or `init` when given). Calls
/// `on_row` after every iteration. Throws std::runtime_error naming the
/// iteration if the loss becomes non-finite.
TrainResult train_loop(const ModelConfig& config, const TrainOptions& options,
                       const std::vector<Sample>& dataset,
                       const std::function<void(const TraceRow&)>& on_row = {},
                       const ModelParams<float>* init = nullptr);

struct GradCheckEntry {
  std::string name;
  int checked = 0;
  double max_rel_err = 0;
  double max_abs_grad = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0;
  double max_abs_grad = 0;
};

struct GradCheckOptions {
  int samples_per_tensor = 20;
  double step = 1e-6;
  double rel_floor = 1e-6;  // relative error denominator floor
  int batch = 2;
  int input_size = 64;
  bool with_faces = true;
  bool jitter = true;  // randomise BN affine terms, slopes and biases first
  LossConfig loss;
};

/// Width 8, depth 2, four levels: the configuration gradient checks run on.
ModelConfig tiny_config(Variant variant = Variant::Fpn, ActKind activation = ActKind::PRelu);

/// End-to-end loss gradient vs central differences, in double precision, with
/// the mined assignment held fixed.
GradCheckReport grad_check(const ModelConfig& config, std::uint64_t seed,
                           const GradCheckOptions& options = {});

}  // namespace extd
