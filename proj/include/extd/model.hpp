#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "extd/kernels.hpp"
#include "extd/tensor.hpp"

namespace extd {

enum class Variant { Ssd, Fpn };

std::string to_string(Variant v);
std::string to_string(ActKind a);
Variant parse_variant(std::string_view s);
ActKind parse_activation(std::string_view s);

/// Declarative description of one EXTD detector.
///
/// `expansion` holds one hidden-width multiplier per inverted-residual block of
/// the shared backbone. Block 0 is the non-expanding type-(a) block, so its
/// entry must be 1.
struct ModelConfig {
  Variant variant = Variant::Fpn;
  int width = 32;
  int depth = 8;
  ActKind activation = ActKind::PRelu;
  std::vector<int> expansion = std::vector<int>(8, 1);
  int levels = 6;
  std::uint64_t seed = 0;
  /// Keep separate running statistics per backbone pass (affine terms stay shared).
  bool bn_per_pass = false;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  /// Input sides must be multiples of this (2^(levels+1)).
  int size_multiple() const { return 1 << (levels + 1); }

  /// e.g. "EXTD-FPN-32-PReLU".
  std::string name() const;

  /// Frozen default configurations (expansions calibrated against the
  /// target parameter budgets). Width 32 uses depth 8, widths 48 and 64
  /// use depth 6.
  static ModelConfig preset(Variant variant, int width, ActKind activation = ActKind::PRelu);
};

// ---------------------------------------------------------------------------
// Architecture description, shared by model building, execution and cost
// accounting.
// ---------------------------------------------------------------------------

enum class LayerKind { Conv, BatchNorm, Activation, Upsample };

struct LayerDesc {
  LayerKind kind = LayerKind::Conv;
  std::string name;  // parameter prefix
  ConvSpec conv{};   // Conv only
  int channels = 0;  // BatchNorm / Activation / Upsample
  ActKind act = ActKind::Relu;
};

struct BlockDesc {
  std::string name;
  std::vector<LayerDesc> layers;
  bool residual = false;
};

struct HeadDesc {
  std::string name;
  ConvSpec cls;
  ConvSpec reg;
  int maxout_bg = 0;  // > 0: cls emits maxout_bg background channels + 1 face channel
};

struct Architecture {
  BlockDesc entry;                  // E
  std::vector<BlockDesc> backbone;  // F, applied once per pyramid level
  std::vector<BlockDesc> upsample;  // U_1 .. U_{N-1}; empty for SSD
  std::vector<HeadDesc> heads;      // level 1 (finest) .. N
};

Architecture describe(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// BatchNorm running statistics are stored alongside the learnable tensors but
/// are neither trained nor counted as parameters.
bool is_running_stat(std::string_view name);

/// Excluded from weight decay: BN affine terms and PReLU slopes.
bool is_decay_exempt(std::string_view name);

/// Key of a running-statistics tensor, optionally specialised to one backbone pass.
std::string running_key(const std::string& layer, std::string_view stat, int pass = -1);

template <typename T>
struct ModelParams {
  std::map<std::string, BasicTensor<T>> tensors;

  BasicTensor<T>& at(const std::string& name);
  const BasicTensor<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
    return out;
  }

  bool identical(const ModelParams& other) const;
};

template <typename T>
using ParamGrads = std::map<std::string, BasicTensor<T>>;

/// He-initialised parameters for `config`; identical seeds give bit-identical stores.
template <typename T>
ModelParams<T> build_model(const ModelConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

template <typename T>
struct PyramidFeatures {
  std::vector<BasicTensor<T>> maps;
  std::vector<int> strides;
};

template <typename T>
struct HeadOutput {
  BasicTensor<T> cls;  // (background, face) logits
  BasicTensor<T> reg;  // (dx, dy, dw, dh)
};

struct RunOptions {
  BnMode mode = BnMode::Infer;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
};

template <typename T>
struct LayerTrace {
  BasicTensor<T> input;
  BatchNormCache<T> bn;
};

template <typename T>
struct BlockTrace {
  std::vector<LayerTrace<T>> layers;
};

template <typename T>
struct HeadTrace {
  BasicTensor<T> input;
  BasicTensor<T> cls_raw;  // pre-maxout logits, finest level only
};

/// Everything the backward pass needs from one training forward.
template <typename T>
struct ForwardTrace {
  BlockTrace<T> entry;
  std::vector<std::vector<BlockTrace<T>>> passes;  // [pass][backbone block]
  std::vector<BlockTrace<T>> upsample;
  std::vector<HeadTrace<T>> heads;
  std::vector<Shape> feature_shapes;  // f_1 .. f_N
};

/// f_1..f_N (finest first, strides 4, 8, ...), every pass through the same F.
template <typename T>
PyramidFeatures<T> iterate_features(const ModelParams<T>& params, const ModelConfig& config,
                                    const BasicTensor<T>& image);

/// g_1..g_N (coarsest first): g_1 = f_N, g_{i+1} = U_i(g_i) + f_{N-i}.
template <typename T>
PyramidFeatures<T> fpn_combine(const ModelParams<T>& params, const ModelConfig& config,
                               const PyramidFeatures<T>& features);

/// Per-level head outputs, finest level first, whatever the order of `pyramid`.
template <typename T>
std::vector<HeadOutput<T>> heads_forward(const ModelParams<T>& params, const ModelConfig& config,
                                         const PyramidFeatures<T>& pyramid);

/// Image to head outputs. In Train mode BN uses batch statistics and updates
/// the running statistics inside `params`; pass `trace` to enable backward().
template <typename T>
std::vector<HeadOutput<T>> forward(ModelParams<T>& params, const ModelConfig& config,
                                   const BasicTensor<T>& image, const RunOptions& options,
                                   ForwardTrace<T>* trace = nullptr);

/// Inference-only forward (running statistics, params untouched).
template <typename T>
std::vector<HeadOutput<T>> infer(const ModelParams<T>& params, const ModelConfig& config,
                                 const BasicTensor<T>& image);

/// Gradients of every trainable tensor given gradients on the head outputs.
template <typename T>
ParamGrads<T> backward(const ModelParams<T>& params, const ModelConfig& config,
                       const ForwardTrace<T>& trace,
                       const std::vector<HeadOutput<T>>& head_grads);

}  // namespace extd
