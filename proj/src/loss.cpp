#include "extd/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace extd {

namespace {

template <typename T>
void check_heads(const std::vector<HeadOutput<T>>& heads, const AnchorGrid& grid) {
  if (heads.size() != grid.levels.size()) {
    throw std::invalid_argument("loss: " + std::to_string(heads.size()) + " head outputs for " +
                                std::to_string(grid.levels.size()) + " anchor levels");
  }
  for (std::size_t l = 0; l < heads.size(); ++l) {
    const auto& lv = grid.levels[l];
    const Shape& c = heads[l].cls.shape();
    const Shape& r = heads[l].reg.shape();
    if (c.c != 2 || r.c != 4 || c.h != lv.rows || c.w != lv.cols || r.h != lv.rows ||
        r.w != lv.cols || r.n != c.n) {
      throw std::invalid_argument("loss: level " + std::to_string(l + 1) + " outputs " + c.str() +
                                  "/" + r.str() + " do not cover its " + std::to_string(lv.rows) +
                                  "x" + std::to_string(lv.cols) + " anchors");
    }
  }
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Cross-entropy of a two-way softmax, target face or background.
double two_class_ce(double bg, double face, bool is_face) {
  return is_face ? softplus(bg - face) : softplus(face - bg);
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

template <typename T>
AnchorLogits gather_logits(const std::vector<HeadOutput<T>>& heads, const AnchorGrid& grid, int n) {
  check_heads(heads, grid);
  AnchorLogits out;
  out.background.resize(grid.size());
  out.face.resize(grid.size());
  for (std::size_t l = 0; l < heads.size(); ++l) {
    const auto& lv = grid.levels[l];
    const auto& cls = heads[l].cls;
    for (int r = 0; r < lv.rows; ++r)
      for (int c = 0; c < lv.cols; ++c) {
        const std::size_t a = lv.offset + static_cast<std::size_t>(r) * lv.cols + c;
        out.background[a] = cls.at(n, 0, r, c);
        out.face[a] = cls.at(n, 1, r, c);
      }
  }
  return out;
}

template <typename T>
std::vector<double> classification_losses(const std::vector<HeadOutput<T>>& heads,
                                          const AnchorGrid& grid, int n,
                                          const MatchAssignment& assignment) {
  if (assignment.labels.size() != grid.size()) {
    throw std::invalid_argument("classification_losses: assignment covers " +
                                std::to_string(assignment.labels.size()) + " anchors, grid has " +
                                std::to_string(grid.size()));
  }
  const AnchorLogits z = gather_logits(heads, grid, n);
  std::vector<double> out(grid.size());
  for (std::size_t a = 0; a < grid.size(); ++a) {
    out[a] = two_class_ce(z.background[a], z.face[a], assignment.labels[a] == Label::Positive);
  }
  return out;
}

std::vector<Label> hard_negative_mine(std::span<const double> cls_losses,
                                      const MatchAssignment& assignment, double ratio,
                                      int empty_negatives) {
  if (cls_losses.size() != assignment.labels.size()) {
    throw std::invalid_argument("hard_negative_mine: loss/label count mismatch");
  }
  std::vector<Label> labels = assignment.labels;
  std::vector<std::size_t> negatives;
  std::size_t positives = 0;
  for (std::size_t a = 0; a < labels.size(); ++a) {
    if (labels[a] == Label::Positive) ++positives;
    if (labels[a] == Label::Negative) negatives.push_back(a);
  }
  const std::size_t want =
      positives > 0 ? static_cast<std::size_t>(std::floor(ratio * static_cast<double>(positives)))
                    : static_cast<std::size_t>(std::max(0, empty_negatives));
  const std::size_t keep = std::min(want, negatives.size());
  auto harder = [&](std::size_t x, std::size_t y) {
    return cls_losses[x] > cls_losses[y] || (cls_losses[x] == cls_losses[y] && x < y);
  };
  std::nth_element(negatives.begin(), negatives.begin() + static_cast<std::ptrdiff_t>(keep),
                   negatives.end(), harder);
  for (std::size_t k = keep; k < negatives.size(); ++k) labels[negatives[k]] = Label::Ignore;
  return labels;
}

template <typename T>
LossResult<T> multitask_loss(const std::vector<HeadOutput<T>>& heads, const AnchorGrid& grid,
                             const std::vector<MatchAssignment>& assignments,
                             const LossConfig& config) {
  check_heads(heads, grid);
  const int batch = heads.empty() ? 0 : heads[0].cls.n();
  if (static_cast<int>(assignments.size()) != batch) {
    throw std::invalid_argument("multitask_loss: " + std::to_string(assignments.size()) +
                                " assignments for a batch of " + std::to_string(batch));
  }
  for (const auto& m : assignments) {
    if (m.labels.size() != grid.size() || m.reg_targets.size() != grid.size()) {
      throw std::invalid_argument("multitask_loss: assignment covers " +
                                  std::to_string(m.labels.size()) + " anchors, grid has " +
                                  std::to_string(grid.size()));
    }
  }

  LossResult<T> res;
  LossBreakdown& b = res.breakdown;
  b.lambda = config.lambda;
  long n_active = 0;
  for (const auto& m : assignments)
    for (Label l : m.labels) {
      if (l == Label::Positive) ++b.n_reg;
      if (l != Label::Ignore) ++n_active;
    }
  if (config.ncls_all_anchors) {
    b.n_cls = 0;
    for (const auto& m : assignments) b.n_cls += static_cast<long>(m.labels.size());
  } else {
    b.n_cls = n_active;
  }

  const double cls_scale = b.n_cls > 0 ? config.lambda / static_cast<double>(b.n_cls) : 0.0;
  const double reg_scale = b.n_reg > 0 ? 1.0 / static_cast<double>(b.n_reg) : 0.0;

  for (const auto& h : heads) res.grads.push_back({BasicTensor<T>::zeros_like(h.cls), BasicTensor<T>::zeros_like(h.reg)});
  // Running mean: equal per-anchor losses give back exactly that loss.
  double cls_mean = 0;
  long seen = 0;

  for (std::size_t l = 0; l < heads.size(); ++l) {
    const auto& lv = grid.levels[l];
    const auto& cls = heads[l].cls;
    const auto& reg = heads[l].reg;
    auto& gcls = res.grads[l].cls;
    auto& greg = res.grads[l].reg;
    for (int n = 0; n < batch; ++n) {
      const auto& m = assignments[static_cast<std::size_t>(n)];
      for (int r = 0; r < lv.rows; ++r)
        for (int c = 0; c < lv.cols; ++c) {
          const std::size_t a = lv.offset + static_cast<std::size_t>(r) * lv.cols + c;
          const Label label = m.labels[a];
          if (label == Label::Ignore) continue;
          const bool face = label == Label::Positive;
          const double z0 = cls.at(n, 0, r, c);
          const double z1 = cls.at(n, 1, r, c);
          const double ce = two_class_ce(z0, z1, face);
          b.cls_sum += ce;
          cls_mean += (ce - cls_mean) / static_cast<double>(++seen);
          const double d1 = (sigmoid(z1 - z0) - (face ? 1.0 : 0.0)) * cls_scale;
          gcls.at(n, 1, r, c) = static_cast<T>(d1);
          gcls.at(n, 0, r, c) = static_cast<T>(-d1);
          if (!face) continue;
          for (int k = 0; k < 4; ++k) {
            const double diff = static_cast<double>(reg.at(n, k, r, c)) - m.reg_targets[a][k];
            b.reg_sum += smooth_l1(diff);
            const double g = std::abs(diff) < 1.0 ? diff : (diff > 0 ? 1.0 : -1.0);
            greg.at(n, k, r, c) = static_cast<T>(g * reg_scale);
          }
        }
    }
  }
  b.cls_term = b.n_cls == n_active ? config.lambda * cls_mean : cls_scale * b.cls_sum;
  b.reg_term = reg_scale * b.reg_sum;
  b.total = b.cls_term + b.reg_term;
  return res;
}

#define EXTD_INSTANTIATE_LOSS(T)                                                                 \
  template AnchorLogits gather_logits(const std::vector<HeadOutput<T>>&, const AnchorGrid&, int); \
  template std::vector<double> classification_losses(const std::vector<HeadOutput<T>>&,          \
                                                     const AnchorGrid&, int,                     \
                                                     const MatchAssignment&);                    \
  template LossResult<T> multitask_loss(const std::vector<HeadOutput<T>>&, const AnchorGrid&,    \
                                        const std::vector<MatchAssignment>&, const LossConfig&);

EXTD_INSTANTIATE_LOSS(float)
EXTD_INSTANTIATE_LOSS(double)

#undef EXTD_INSTANTIATE_LOSS

}  // namespace extd
