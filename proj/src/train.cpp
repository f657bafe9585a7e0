#include "extd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

namespace extd {

std::string format_trace_row(const TraceRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%ld %.6g %.6g %.6g %.6g", r.iter, r.total, r.cls, r.reg, r.lr);
  return buf;
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: no images");
  const Shape s = images.front()->shape();
  Tensor out(static_cast<int>(images.size()), s.c, s.h, s.w);
  auto dst = out.data();
  std::size_t at = 0;
  for (const Tensor* im : images) {
    if (im->n() != 1 || im->c() != s.c || im->h() != s.h || im->w() != s.w) {
      throw std::invalid_argument("stack_images: " + im->shape().str() + " does not match " +
                                  s.str());
    }
    auto src = im->data();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(at));
    at += src.size();
  }
  return out;
}

template <typename T>
std::vector<MatchAssignment> mined_assignments(const std::vector<HeadOutput<T>>& heads,
                                               const AnchorGrid& grid,
                                               const std::vector<std::vector<Box>>& boxes,
                                               const MatchConfig& match, const LossConfig& loss) {
  std::vector<MatchAssignment> out;
  for (std::size_t n = 0; n < boxes.size(); ++n) {
    MatchAssignment m = match_scale_compensated(boxes[n], grid, match);
    const auto losses = classification_losses(heads, grid, static_cast<int>(n), m);
    m.labels = hard_negative_mine(losses, m, loss.neg_ratio, loss.empty_negatives);
    out.push_back(std::move(m));
  }
  return out;
}

template std::vector<MatchAssignment> mined_assignments(const std::vector<HeadOutput<float>>&,
                                                        const AnchorGrid&,
                                                        const std::vector<std::vector<Box>>&,
                                                        const MatchConfig&, const LossConfig&);
template std::vector<MatchAssignment> mined_assignments(const std::vector<HeadOutput<double>>&,
                                                        const AnchorGrid&,
                                                        const std::vector<std::vector<Box>>&,
                                                        const MatchConfig&, const LossConfig&);

namespace {

Sample fit_to(const Sample& s, int res) {
  if (s.image.h() == res && s.image.w() == res) return s;
  Sample out;
  out.image = resize_window(s.image, 0, 0, s.image.w(), s.image.h(), res, res);
  const double sx = static_cast<double>(res) / s.image.w();
  const double sy = static_cast<double>(res) / s.image.h();
  for (const auto& b : s.boxes) out.boxes.push_back({b.x * sx, b.y * sy, b.w * sx, b.h * sy});
  return out;
}

}  // namespace

TrainResult train_loop(const ModelConfig& config, const TrainOptions& options,
                       const std::vector<Sample>& dataset,
                       const std::function<void(const TraceRow&)>& on_row,
                       const ModelParams<float>* init) {
  config.validate();
  options.schedule.validate();
  if (dataset.empty()) throw std::invalid_argument("train_loop: empty dataset");
  const int res = options.resolution;
  if (res <= 0 || res % config.size_multiple() != 0) {
    throw std::invalid_argument("train_loop: resolution " + std::to_string(res) +
                                " is not divisible by " + std::to_string(config.size_multiple()));
  }

  TrainResult result;
  result.params = init ? *init : build_model<float>(config, options.seed);
  auto opt = make_optimizer(result.params, options.schedule.base_lr, options.momentum,
                            options.weight_decay);
  const AnchorGrid grid = generate_anchors(res, res, config.levels);
  AugmentConfig aug = options.augment;
  aug.resolution = res;
  const RunOptions run{BnMode::Train};

  std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  const int batch = options.schedule.batch_size;
  for (long it = 0; it < options.schedule.total_iters; ++it) {
    std::vector<Sample> samples;
    for (int b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Sample& src = dataset[order[cursor++]];
      samples.push_back(options.use_augment ? augment(src, aug, rng) : fit_to(src, res));
    }
    std::vector<const Tensor*> images;
    std::vector<std::vector<Box>> boxes;
    for (const auto& s : samples) {
      images.push_back(&s.image);
      boxes.push_back(s.boxes);
    }
    const Tensor x = stack_images(images);

    ForwardTrace<float> trace;
    const auto heads = forward(result.params, config, x, run, &trace);
    const auto assignments = mined_assignments(heads, grid, boxes, options.match, options.loss);
    const auto loss = multitask_loss(heads, grid, assignments, options.loss);
    const LossBreakdown& lb = loss.breakdown;
    if (!std::isfinite(lb.total)) {
      throw std::runtime_error("non-finite loss at iteration " + std::to_string(it + 1) +
                               " (cls " + std::to_string(lb.cls_term) + ", reg " +
                               std::to_string(lb.reg_term) + ")");
    }
    const auto grads = backward(result.params, config, trace, loss.grads);
    opt.lr = options.schedule.lr_at(it);
    sgd_step(result.params, grads, opt);

    TraceRow row{it + 1, lb.total, lb.cls_term, lb.reg_term, opt.lr};
    result.trace.push_back(row);
    if (on_row) on_row(row);
  }
  return result;
}

ModelConfig tiny_config(Variant variant, ActKind activation) {
  ModelConfig c;
  c.variant = variant;
  c.width = 8;
  c.depth = 2;
  c.expansion = {1, 2};
  c.levels = 4;
  c.activation = activation;
  return c;
}

GradCheckReport grad_check(const ModelConfig& config, std::uint64_t seed,
                           const GradCheckOptions& o) {
  auto params = build_model<double>(config, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // At initialisation (beta = 0, shared slopes) a BN scale feeding PReLU and a
  // linear conv into another BN is an exact symmetry with zero gradient, which
  // leaves only finite-difference noise to compare. Move off that point.
  if (o.jitter) {
    for (auto& [name, t] : params.tensors) {
      auto ends = [&](std::string_view s) { return name.ends_with(s); };
      for (auto& v : t.data()) {
        if (ends(".gamma")) v = 0.5 + u(rng);
        else if (ends(".beta")) v = u(rng) - 0.5;
        else if (ends(".slope")) v = 0.05 + 0.45 * u(rng);
        else if (ends(".bias")) v = 0.2 * (u(rng) - 0.5);
      }
    }
  }

  const int side = o.input_size;
  TensorD image(o.batch, 3, side, side);
  for (auto& v : image.data()) v = u(rng);
  std::vector<std::vector<Box>> boxes(static_cast<std::size_t>(o.batch));
  if (o.with_faces) {
    for (auto& list : boxes) {
      const int count = 1 + static_cast<int>(u(rng) * 3);
      for (int k = 0; k < count; ++k) {
        const double s = 6 + u(rng) * side * 0.5;
        list.push_back({u(rng) * (side - s), u(rng) * (side - s), s, s * (0.8 + 0.4 * u(rng))});
      }
    }
  }
  const AnchorGrid grid = generate_anchors(side, side, config.levels);
  const RunOptions run{BnMode::Train};

  ForwardTrace<double> trace;
  const auto heads = forward(params, config, image, run, &trace);
  const auto assignments = mined_assignments(heads, grid, boxes, MatchConfig{}, o.loss);
  const auto loss = multitask_loss(heads, grid, assignments, o.loss);
  const auto grads = backward(params, config, trace, loss.grads);

  auto objective = [&] {
    return multitask_loss(forward(params, config, image, run), grid, assignments, o.loss)
        .breakdown.total;
  };

  const double base = objective();
  GradCheckReport report;
  std::mt19937_64 pick(seed + 2);
  for (auto& [name, tensor] : params.tensors) {
    if (is_running_stat(name)) continue;
    GradCheckEntry e;
    e.name = name;
    const auto& g = grads.at(name);
    std::vector<std::size_t> idx(tensor.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), pick);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(o.samples_per_tensor)));
    for (std::size_t i : idx) {
      const double keep = tensor[i];
      // One-sided differences that disagree mean the step straddles a
      // rectifier or maxout kink; retry closer in.
      double numeric = 0;
      double h = o.step;
      for (int attempt = 0; attempt < 4; ++attempt, h /= 10) {
        tensor[i] = keep + h;
        const double up = objective();
        tensor[i] = keep - h;
        const double down = objective();
        tensor[i] = keep;
        numeric = (up - down) / (2 * h);
        const double fwd = (up - base) / h, bwd = (base - down) / h;
        if (std::abs(fwd - bwd) <= 1e-3 * std::max(std::abs(fwd), std::abs(bwd)) + 1e-6) break;
      }
      const double scale = std::max({std::abs(g[i]), std::abs(numeric), o.rel_floor});
      e.max_rel_err = std::max(e.max_rel_err, std::abs(g[i] - numeric) / scale);
      e.max_abs_grad = std::max(e.max_abs_grad, std::abs(g[i]));
      ++e.checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
    report.max_abs_grad = std::max(report.max_abs_grad, e.max_abs_grad);
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace extd
