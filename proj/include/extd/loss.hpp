#pragma once

#include <span>
#include <vector>

#include "extd/anchors.hpp"
#include "extd/model.hpp"

namespace extd {

struct LossConfig {
  double lambda = 4.0;
  double neg_ratio = 3.0;
  int empty_negatives = 16;  // negatives kept when an image has no positives
  /// Alternative reading of N_cls: every non-ignored anchor instead of positives + mined negatives.
  bool ncls_all_anchors = false;
};

struct LossBreakdown {
  double total = 0;
  double cls_term = 0;  // lambda / n_cls * cls_sum
  double reg_term = 0;  // reg_sum / n_reg
  double cls_sum = 0;
  double reg_sum = 0;
  long n_cls = 0;
  long n_reg = 0;
  double lambda = 4.0;
};

/// Face/background logits of every anchor of image `n`, in anchor-grid order.
struct AnchorLogits {
  std::vector<double> background;
  std::vector<double> face;
};

template <typename T>
AnchorLogits gather_logits(const std::vector<HeadOutput<T>>& heads, const AnchorGrid& grid, int n);

/// Two-class cross-entropy of each anchor against its matched label
/// (Ignore anchors are scored as background).
template <typename T>
std::vector<double> classification_losses(const std::vector<HeadOutput<T>>& heads,
                                          const AnchorGrid& grid, int n,
                                          const MatchAssignment& assignment);

/// Keeps all positives and the highest-loss negatives; the rest become Ignore.
std::vector<Label> hard_negative_mine(std::span<const double> cls_losses,
                                      const MatchAssignment& assignment, double ratio = 3.0,
                                      int empty_negatives = 16);

template <typename T>
struct LossResult {
  LossBreakdown breakdown;
  std::vector<HeadOutput<T>> grads;  // d total / d head outputs
};

/// `assignments[n]` must already be mined. Normalisers are batch totals.
template <typename T>
LossResult<T> multitask_loss(const std::vector<HeadOutput<T>>& heads, const AnchorGrid& grid,
                             const std::vector<MatchAssignment>& assignments,
                             const LossConfig& config = {});

double smooth_l1(double x);

}  // namespace extd
