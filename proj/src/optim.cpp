#include "extd/optim.hpp"

#include <stdexcept>

namespace extd {

template <typename T>
OptimizerState<T> make_optimizer(const ModelParams<T>& params, double lr, double momentum,
                                 double weight_decay) {
  OptimizerState<T> s;
  s.lr = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  for (const auto& [name, t] : params.tensors) {
    if (!is_running_stat(name)) s.velocity.emplace(name, BasicTensor<T>::zeros_like(t));
  }
  return s;
}

template <typename T>
void sgd_step(ModelParams<T>& params, const ParamGrads<T>& grads, OptimizerState<T>& state) {
  if (grads.size() != state.velocity.size()) {
    throw std::invalid_argument("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(state.velocity.size()) + " trainable tensors");
  }
  for (auto& [name, v] : state.velocity) {
    auto g = grads.find(name);
    if (g == grads.end()) throw std::invalid_argument("sgd_step: no gradient for '" + name + "'");
    auto& p = params.at(name);
    if (!(g->second.shape() == p.shape()) || !(v.shape() == p.shape())) {
      throw std::invalid_argument("sgd_step: shape mismatch for '" + name + "'");
    }
    const double wd = is_decay_exempt(name) ? 0.0 : state.weight_decay;
    const T m = static_cast<T>(state.momentum);
    const T d = static_cast<T>(wd);
    const T lr = static_cast<T>(state.lr);
    auto pv = p.data();
    auto vv = v.data();
    auto gv = g->second.data();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      vv[i] = m * vv[i] + gv[i] + d * pv[i];
      pv[i] -= lr * vv[i];
    }
  }
}

void Schedule::validate() const {
  if (base_lr <= 0) throw std::invalid_argument("schedule: base_lr must be positive");
  if (total_iters <= 0) throw std::invalid_argument("schedule: total_iters must be positive");
  if (batch_size <= 0) throw std::invalid_argument("schedule: batch_size must be positive");
  if (warmup_iters < 0) throw std::invalid_argument("schedule: warmup_iters must be >= 0");
  double prev_lr = base_lr;
  long prev_iter = -1;
  for (const auto& [it, lr] : drops) {
    if (it <= prev_iter) throw std::invalid_argument("schedule: drop points must increase in iteration");
    if (lr >= prev_lr) throw std::invalid_argument("schedule: drop points must decrease the rate");
    prev_iter = it;
    prev_lr = lr;
  }
}

double Schedule::lr_at(long iter) const {
  double lr = base_lr;
  for (const auto& [it, v] : drops)
    if (iter >= it) lr = v;
  if (iter < warmup_iters) lr *= static_cast<double>(iter + 1) / static_cast<double>(warmup_iters);
  return lr;
}

Schedule Schedule::full_run() { return Schedule{}; }

template OptimizerState<float> make_optimizer(const ModelParams<float>&, double, double, double);
template OptimizerState<double> make_optimizer(const ModelParams<double>&, double, double, double);
template void sgd_step(ModelParams<float>&, const ParamGrads<float>&, OptimizerState<float>&);
template void sgd_step(ModelParams<double>&, const ParamGrads<double>&, OptimizerState<double>&);

}  // namespace extd
