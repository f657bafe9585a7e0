#include "extd/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace extd {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

AnchorGrid generate_anchors(int input_h, int input_w, int levels) {
  if (levels < 1) throw std::invalid_argument("generate_anchors: levels must be positive");
  const int m = 1 << (levels + 1);
  if (input_h <= 0 || input_w <= 0 || input_h % m != 0 || input_w % m != 0) {
    throw std::invalid_argument("generate_anchors: " + std::to_string(input_h) + "x" +
                                std::to_string(input_w) + " is not divisible by " +
                                std::to_string(m));
  }
  AnchorGrid grid;
  for (int i = 0; i < levels; ++i) {
    AnchorLevel l;
    l.stride = 1 << (i + 2);
    l.size = 4 * l.stride;
    l.rows = input_h / l.stride;
    l.cols = input_w / l.stride;
    l.offset = grid.boxes.size();
    for (int r = 0; r < l.rows; ++r) {
      for (int c = 0; c < l.cols; ++c) {
        grid.boxes.push_back(
            Box::from_center(l.stride * (c + 0.5), l.stride * (r + 0.5), l.size, l.size));
      }
    }
    grid.levels.push_back(l);
  }
  return grid;
}

Deltas encode(const Box& gt, const Box& anchor) {
  if (!gt.valid()) throw std::invalid_argument("encode: ground-truth box has non-positive extent");
  if (!anchor.valid()) throw std::invalid_argument("encode: anchor has non-positive extent");
  return {(gt.cx() - anchor.cx()) / anchor.w, (gt.cy() - anchor.cy()) / anchor.h,
          std::log(gt.w / anchor.w), std::log(gt.h / anchor.h)};
}

Box decode(const Deltas& d, const Box& anchor, double clip) {
  const double cx = anchor.cx() + d[0] * anchor.w;
  const double cy = anchor.cy() + d[1] * anchor.h;
  const double w = anchor.w * std::exp(std::clamp(d[2], -clip, clip));
  const double h = anchor.h * std::exp(std::clamp(d[3], -clip, clip));
  return Box::from_center(cx, cy, w, h);
}

std::size_t MatchAssignment::num_positive() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), Label::Positive));
}

std::vector<int> MatchAssignment::positives_per_gt(std::size_t num_gts) const {
  std::vector<int> counts(num_gts, 0);
  for (std::size_t a = 0; a < labels.size(); ++a) {
    if (labels[a] == Label::Positive) ++counts.at(static_cast<std::size_t>(matched_gt[a]));
  }
  return counts;
}

MatchAssignment match_scale_compensated(const std::vector<Box>& gts, const AnchorGrid& anchors,
                                        const MatchConfig& config) {
  const std::size_t na = anchors.size();
  const std::size_t ng = gts.size();
  if (na == 0) throw std::invalid_argument("match_scale_compensated: no anchors");
  for (const auto& g : gts) {
    if (!g.valid()) throw std::invalid_argument("match_scale_compensated: invalid ground-truth box");
  }

  MatchAssignment m;
  m.labels.assign(na, Label::Negative);
  m.matched_gt.assign(na, -1);
  m.reg_targets.assign(na, Deltas{0, 0, 0, 0});
  if (ng == 0) return m;

  std::vector<std::vector<double>> overlap(ng, std::vector<double>(na));
  for (std::size_t g = 0; g < ng; ++g)
    for (std::size_t a = 0; a < na; ++a) overlap[g][a] = iou(gts[g], anchors.boxes[a]);

  auto assign = [&](std::size_t a, std::size_t g) {
    m.labels[a] = Label::Positive;
    m.matched_gt[a] = static_cast<int>(g);
  };

  // Stage 1a: thresholded best-box assignment.
  for (std::size_t a = 0; a < na; ++a) {
    std::size_t best = 0;
    for (std::size_t g = 1; g < ng; ++g)
      if (overlap[g][a] > overlap[best][a]) best = g;
    if (overlap[best][a] >= config.t1) assign(a, best);
  }

  // Stage 1b: each box claims a distinct anchor.
  if (config.force_best) {
    std::vector<bool> anchor_taken(na, false);
    std::vector<bool> gt_done(ng, false);
    std::vector<std::size_t> best(ng);
    auto best_free = [&](std::size_t g) {
      std::size_t b = na;
      for (std::size_t a = 0; a < na; ++a) {
        if (anchor_taken[a]) continue;
        if (b == na || overlap[g][a] > overlap[g][b]) b = a;
      }
      return b;
    };
    for (std::size_t g = 0; g < ng; ++g) best[g] = best_free(g);
    for (std::size_t round = 0; round < ng; ++round) {
      std::size_t pick = ng;
      for (std::size_t g = 0; g < ng; ++g) {
        if (gt_done[g] || best[g] == na) continue;
        if (pick == ng) {
          pick = g;
          continue;
        }
        const double o = overlap[g][best[g]];
        const double po = overlap[pick][best[pick]];
        if (o > po || (o == po && best[g] < best[pick])) pick = g;
      }
      if (pick == ng) break;  // more boxes than anchors
      const std::size_t a = best[pick];
      assign(a, pick);
      anchor_taken[a] = true;
      gt_done[pick] = true;
      for (std::size_t g = 0; g < ng; ++g)
        if (!gt_done[g] && best[g] == a) best[g] = best_free(g);
    }
  }

  // Stage 2: top up boxes with too few positives.
  if (config.compensate) {
    std::vector<int> counts = m.positives_per_gt(ng);
    const long total = std::accumulate(counts.begin(), counts.end(), 0L);
    const int target = std::max<long>(1, total / static_cast<long>(ng));
    for (std::size_t g = 0; g < ng; ++g) {
      if (counts[g] >= target) continue;
      std::vector<std::size_t> cand;
      for (std::size_t a = 0; a < na; ++a)
        if (m.labels[a] != Label::Positive && overlap[g][a] > config.t2) cand.push_back(a);
      std::stable_sort(cand.begin(), cand.end(),
                       [&](std::size_t x, std::size_t y) { return overlap[g][x] > overlap[g][y]; });
      for (std::size_t k = 0; k < cand.size() && counts[g] < target; ++k) {
        assign(cand[k], g);
        ++counts[g];
      }
    }
  }

  for (std::size_t a = 0; a < na; ++a) {
    if (m.labels[a] == Label::Positive) {
      m.reg_targets[a] = encode(gts[static_cast<std::size_t>(m.matched_gt[a])], anchors.boxes[a]);
    }
  }
  return m;
}

}  // namespace extd
