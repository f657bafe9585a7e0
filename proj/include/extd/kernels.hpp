#pragma once

#include <span>
#include <vector>

#include "extd/tensor.hpp"

namespace extd {

enum class ActKind { Relu, LeakyRelu, PRelu };
enum class BnMode { Train, Infer };

/// Fixed negative slope of leaky-ReLU, also the initial PReLU slope.
inline constexpr double kNegativeSlope = 0.25;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Direct convolution. Weights are (out, in/groups, kH, kW); `bias` is empty or
/// holds one value per output channel. Pointwise and dense kernels run through
/// a matrix-product fast path with identical semantics.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                      const ConvSpec& spec, std::span<const T> bias = {});

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  std::vector<T> bias;  // empty unless spec.has_bias
};

template <typename T>
ConvGrads<T> conv2d_vjp(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                        const ConvSpec& spec, const BasicTensor<T>& upstream);

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// View over the four per-channel vectors of one batch-norm layer. In Train
/// mode, batch_norm() folds the batch statistics into the running vectors.
template <typename T>
struct BatchNormState {
  std::span<const T> gamma;
  std::span<const T> beta;
  std::span<T> running_mean;
  std::span<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  BnMode mode = BnMode::Infer;
};

template <typename T>
struct BatchNormCache {
  BasicTensor<T> x_hat;
  std::vector<double> inv_std;
  BnMode mode = BnMode::Infer;
};

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, BatchNormState<T>& state,
                          BatchNormCache<T>* cache = nullptr);

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
BatchNormGrads<T> batch_norm_vjp(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                 const BasicTensor<T>& upstream);

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

/// x >= 0 -> x, otherwise slope * x. `slopes` is one value per channel for
/// PRelu and ignored otherwise.
template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& input, ActKind kind,
                          std::span<const T> slopes = {});

template <typename T>
struct ActivationGrads {
  BasicTensor<T> input;
  std::vector<T> slopes;  // filled for PRelu only
};

template <typename T>
ActivationGrads<T> activation_vjp(const BasicTensor<T>& input, ActKind kind,
                                  std::span<const T> slopes, const BasicTensor<T>& upstream);

// ---------------------------------------------------------------------------
// Resampling and merging
// ---------------------------------------------------------------------------

/// Bilinear 2x upsampling, half-pixel centres (align_corners off).
template <typename T>
BasicTensor<T> upsample_bilinear_x2(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> upsample_bilinear_x2_vjp(const Shape& input_shape, const BasicTensor<T>& upstream);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// In-place a += b.
template <typename T>
void add_into(BasicTensor<T>& a, const BasicTensor<T>& b);

/// Two-channel output: (max of the first `bg_channels` channels, last channel).
/// Ties resolve to the lowest channel index.
template <typename T>
BasicTensor<T> maxout_pairless(const BasicTensor<T>& input, int bg_channels);

template <typename T>
BasicTensor<T> maxout_pairless_vjp(const BasicTensor<T>& input, int bg_channels,
                                   const BasicTensor<T>& upstream);

}  // namespace extd
