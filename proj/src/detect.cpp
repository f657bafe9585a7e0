#include "extd/detect.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace extd {

template <typename T>
BasicTensor<T> pad_to_multiple(const BasicTensor<T>& image, int multiple) {
  const int h = (image.h() + multiple - 1) / multiple * multiple;
  const int w = (image.w() + multiple - 1) / multiple * multiple;
  if (h == image.h() && w == image.w()) return image;
  BasicTensor<T> out(image.n(), image.c(), h, w);
  for (int n = 0; n < image.n(); ++n)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < image.h(); ++y)
        for (int x = 0; x < image.w(); ++x) out.at(n, c, y, x) = image.at(n, c, y, x);
  return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool keep = true;
    for (const auto& k : kept) {
      if (iou(d.box, k.box) > iou_thresh) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(d);
  }
  return kept;
}

template <typename T>
std::vector<Detection> decode_heads(const std::vector<HeadOutput<T>>& heads, const AnchorGrid& grid,
                                    int n, double width, double height, double conf) {
  if (heads.size() != grid.levels.size()) {
    throw std::invalid_argument("decode_heads: head/level count mismatch");
  }
  std::vector<Detection> out;
  for (std::size_t l = 0; l < heads.size(); ++l) {
    const auto& lv = grid.levels[l];
    const auto& cls = heads[l].cls;
    const auto& reg = heads[l].reg;
    for (int r = 0; r < lv.rows; ++r)
      for (int c = 0; c < lv.cols; ++c) {
        const double bg = cls.at(n, 0, r, c), face = cls.at(n, 1, r, c);
        const double score = 1.0 / (1.0 + std::exp(bg - face));
        if (!(score > conf)) continue;
        const Box& anchor = grid.boxes[lv.offset + static_cast<std::size_t>(r) * lv.cols + c];
        const Box b = decode({static_cast<double>(reg.at(n, 0, r, c)), static_cast<double>(reg.at(n, 1, r, c)),
                              static_cast<double>(reg.at(n, 2, r, c)), static_cast<double>(reg.at(n, 3, r, c))},
                             anchor);
        const double x0 = std::clamp(b.x, 0.0, width), y0 = std::clamp(b.y, 0.0, height);
        const double x1 = std::clamp(b.x + b.w, 0.0, width), y1 = std::clamp(b.y + b.h, 0.0, height);
        if (x1 <= x0 || y1 <= y0) continue;
        out.push_back({Box{x0, y0, x1 - x0, y1 - y0}, score, static_cast<int>(l) + 1});
      }
  }
  return out;
}

std::vector<Detection> finalize_detections(std::vector<Detection> raw, const DetectOptions& o) {
  auto kept = nms(std::move(raw), o.nms_iou);
  if (o.topk >= 0 && kept.size() > static_cast<std::size_t>(o.topk)) kept.resize(o.topk);
  return kept;
}

template <typename T>
std::vector<Detection> detect(const ModelParams<T>& params, const ModelConfig& config,
                              const BasicTensor<T>& image, const DetectOptions& options) {
  if (image.n() != 1) throw std::invalid_argument("detect: expected a single image");
  const BasicTensor<T> padded = pad_to_multiple(image, config.size_multiple());
  const auto heads = infer(params, config, padded);
  const AnchorGrid grid = generate_anchors(padded.h(), padded.w(), config.levels);
  return finalize_detections(decode_heads(heads, grid, 0, image.w(), image.h(), options.conf), options);
}

EvalReport average_precision(const std::vector<std::vector<Detection>>& dets,
                             const std::vector<std::vector<Box>>& gts, double iou_thresh) {
  if (dets.size() != gts.size()) {
    throw std::invalid_argument("average_precision: " + std::to_string(dets.size()) +
                                " detection lists for " + std::to_string(gts.size()) + " images");
  }
  EvalReport rep;
  struct Ref {
    double score;
    std::size_t image, index;
  };
  std::vector<Ref> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    rep.num_gt += static_cast<long>(gts[i].size());
    for (std::size_t k = 0; k < dets[i].size(); ++k) order.push_back({dets[i][k].score, i, k});
  }
  rep.num_det = static_cast<long>(order.size());
  std::stable_sort(order.begin(), order.end(),
                   [](const Ref& a, const Ref& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> taken(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);
  std::vector<bool> hit(order.size(), false);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& d = dets[order[r].image][order[r].index];
    const auto& g = gts[order[r].image];
    auto& used = taken[order[r].image];
    double best = -1;
    std::size_t who = g.size();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (used[j]) continue;
      const double o = iou(d.box, g[j]);
      if (o >= iou_thresh && o > best) {
        best = o;
        who = j;
      }
    }
    if (who < g.size()) {
      used[who] = true;
      hit[r] = true;
    }
  }

  // Cumulative precision/recall along the ranking.
  std::vector<double> prec(order.size()), rec(order.size());
  long tp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (hit[r]) ++tp;
    prec[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
    rec[r] = rep.num_gt > 0 ? static_cast<double>(tp) / static_cast<double>(rep.num_gt) : 0.0;
  }

  if (rep.num_gt == 0) {
    rep.ap = order.empty() ? 1.0 : 0.0;
  } else {
    // Precision envelope, then area under the recall steps.
    std::vector<double> env = prec;
    for (std::size_t r = env.size(); r-- > 1;) env[r - 1] = std::max(env[r - 1], env[r]);
    double prev_rec = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (rec[r] > prev_rec) {
        rep.ap += (rec[r] - prev_rec) * env[r];
        prev_rec = rec[r];
      }
    }
  }

  auto counts_at = [&](double t, long& ntp, long& ndet) {
    ntp = 0;
    ndet = 0;
    for (std::size_t r = 0; r < order.size() && order[r].score >= t; ++r) {
      ++ndet;
      if (hit[r]) ++ntp;
    }
  };
  for (int k = 999; k >= 0; --k) {
    const double t = k / 1000.0;
    long ntp, ndet;
    counts_at(t, ntp, ndet);
    PrPoint p;
    p.threshold = t;
    p.precision = ndet > 0 ? static_cast<double>(ntp) / static_cast<double>(ndet) : 1.0;
    p.recall = rep.num_gt > 0 ? static_cast<double>(ntp) / static_cast<double>(rep.num_gt) : 0.0;
    rep.pr.push_back(p);
  }
  long ndet;
  counts_at(0.5, rep.tp, ndet);
  rep.fp = ndet - rep.tp;
  rep.fn = rep.num_gt - rep.tp;
  return rep;
}

std::vector<BenchResult> bench(const ModelParams<float>& params, const ModelConfig& config,
                               const std::vector<int>& sizes, int trials) {
  if (trials < 1) throw std::invalid_argument("bench: trials must be positive");
  std::vector<BenchResult> out;
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int s : sizes) {
    if (s <= 0 || s % config.size_multiple() != 0) {
      throw std::invalid_argument("bench: size " + std::to_string(s) + " is not a multiple of " +
                                  std::to_string(config.size_multiple()));
    }
    Tensor img(1, 3, s, s);
    for (auto& v : img.data()) v = u(rng);
    infer(params, config, img);  // warm-up
    std::vector<double> ms;
    for (int t = 0; t < trials; ++t) {
      const auto t0 = std::chrono::steady_clock::now();
      auto heads = infer(params, config, img);
      const auto t1 = std::chrono::steady_clock::now();
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / trials;
    double var = 0;
    for (double v : ms) var += (v - mean) * (v - mean);
    out.push_back({s, trials, mean, std::sqrt(var / trials)});
  }
  return out;
}

template Tensor pad_to_multiple(const Tensor&, int);
template TensorD pad_to_multiple(const TensorD&, int);
template std::vector<Detection> decode_heads(const std::vector<HeadOutput<float>>&,
                                             const AnchorGrid&, int, double, double, double);
template std::vector<Detection> decode_heads(const std::vector<HeadOutput<double>>&,
                                             const AnchorGrid&, int, double, double, double);
template std::vector<Detection> detect(const ModelParams<float>&, const ModelConfig&,
                                       const Tensor&, const DetectOptions&);
template std::vector<Detection> detect(const ModelParams<double>&, const ModelConfig&,
                                       const TensorD&, const DetectOptions&);

}  // namespace extd
