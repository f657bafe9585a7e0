#pragma once

#include <string>
#include <utility>
#include <vector>

#include "extd/model.hpp"

namespace extd {

template <typename T>
struct OptimizerState {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::map<std::string, BasicTensor<T>> velocity;
};

/// Zero velocity for every trainable tensor of `params`.
template <typename T>
OptimizerState<T> make_optimizer(const ModelParams<T>& params, double lr = 1e-3,
                                 double momentum = 0.9, double weight_decay = 5e-4);

/// v = momentum * v + grad + wd * p;  p -= lr * v.
/// BN affine terms and PReLU slopes get no decay; running statistics are untouched.
template <typename T>
void sgd_step(ModelParams<T>& params, const ParamGrads<T>& grads, OptimizerState<T>& state);

struct Schedule {
  double base_lr = 1e-3;
  long total_iters = 240000;
  std::vector<std::pair<long, double>> drops = {{120000, 1e-4}, {180000, 1e-5}};
  int batch_size = 16;
  /// Linear ramp from base_lr / warmup_iters up to base_lr.
  long warmup_iters = 0;

  void validate() const;
  double lr_at(long iter) const;  // 0-based iteration

  static Schedule full_run();
};

}  // namespace extd
