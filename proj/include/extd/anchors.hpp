#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace extd {

/// Axis-aligned box, top-left corner plus extents, in pixels.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w * h; }
  bool valid() const { return w > 0 && h > 0; }
  static Box from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, w, h};
  }
  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

struct AnchorLevel {
  int stride = 0;
  int size = 0;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;  // global index of (row 0, col 0)

  std::size_t count() const { return static_cast<std::size_t>(rows) * cols; }
};

/// One square anchor per feature-map cell, finest level first.
struct AnchorGrid {
  std::vector<AnchorLevel> levels;
  std::vector<Box> boxes;

  std::size_t size() const { return boxes.size(); }
  std::size_t index(int level, int row, int col) const {
    const auto& l = levels.at(level);
    return l.offset + static_cast<std::size_t>(row) * l.cols + col;
  }
};

/// Level i (0-based) has stride 2^(i+2) and anchors of side 4 * stride.
AnchorGrid generate_anchors(int input_h, int input_w, int levels);

using Deltas = std::array<double, 4>;  // dx, dy, dw, dh

inline constexpr double kDecodeClip = 4.0;

Deltas encode(const Box& gt, const Box& anchor);
/// Log-scale deltas are clamped to [-clip, clip] before exponentiation.
Box decode(const Deltas& d, const Box& anchor, double clip = kDecodeClip);

enum class Label : std::uint8_t { Negative = 0, Positive = 1, Ignore = 2 };

struct MatchConfig {
  double t1 = 0.35;  // stage-1 overlap threshold (>=)
  double t2 = 0.1;   // stage-2 overlap threshold (>)
  bool force_best = true;
  bool compensate = true;  // run stage 2
};

struct MatchAssignment {
  std::vector<Label> labels;
  std::vector<int> matched_gt;  // -1 unless positive
  std::vector<Deltas> reg_targets;

  std::size_t num_positive() const;
  /// Positive anchors per ground-truth box.
  std::vector<int> positives_per_gt(std::size_t num_gts) const;
};

/// Two-stage matching with scale compensation.
///
/// Stage 1: an anchor whose best overlap reaches t1 goes to its best box; then
/// every box claims its best remaining anchor (pairs taken greedily by overlap,
/// so two boxes never compete for one anchor). Stage 2: A is the mean stage-1
/// positive count per box (floored, at least 1); boxes short of A take their
/// best unassigned anchors with overlap above t2. Ties go to the lower anchor
/// index, then the lower box index.
MatchAssignment match_scale_compensated(const std::vector<Box>& gts, const AnchorGrid& anchors,
                                        const MatchConfig& config = {});

}  // namespace extd
