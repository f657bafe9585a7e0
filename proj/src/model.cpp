#include "extd/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace extd {

std::string to_string(Variant v) { return v == Variant::Ssd ? "ssd" : "fpn"; }

std::string to_string(ActKind a) {
  switch (a) {
    case ActKind::Relu:
      return "relu";
    case ActKind::LeakyRelu:
      return "lrelu";
    case ActKind::PRelu:
      return "prelu";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  if (s == "ssd") return Variant::Ssd;
  if (s == "fpn") return Variant::Fpn;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "' (expected ssd or fpn)");
}

ActKind parse_activation(std::string_view s) {
  if (s == "relu") return ActKind::Relu;
  if (s == "lrelu") return ActKind::LeakyRelu;
  if (s == "prelu") return ActKind::PRelu;
  throw std::invalid_argument("unknown activation '" + std::string(s) +
                              "' (expected relu, lrelu or prelu)");
}

void ModelConfig::validate() const {
  if (levels < 2) throw std::invalid_argument("levels must be >= 2");
  if (levels > 12) throw std::invalid_argument("levels must be <= 12");
  if (width < 8) throw std::invalid_argument("width must be >= 8");
  if (depth < 2) throw std::invalid_argument("depth must be >= 2");
  if (expansion.size() != static_cast<std::size_t>(depth)) {
    throw std::invalid_argument("expansion list has " + std::to_string(expansion.size()) +
                                " entries, depth is " + std::to_string(depth));
  }
  for (int e : expansion) {
    if (e < 1) throw std::invalid_argument("expansion factors must be positive");
  }
  if (expansion.front() != 1) {
    throw std::invalid_argument("the first block does not expand; its expansion must be 1");
  }
}

std::string ModelConfig::name() const {
  std::string act = activation == ActKind::PRelu      ? "PReLU"
                    : activation == ActKind::LeakyRelu ? "LReLU"
                                                       : "ReLU";
  return std::string("EXTD-") + (variant == Variant::Fpn ? "FPN" : "SSD") + "-" +
         std::to_string(width) + "-" + act;
}

ModelConfig ModelConfig::preset(Variant variant, int width, ActKind activation) {
  ModelConfig c;
  c.variant = variant;
  c.width = width;
  c.activation = activation;
  // Output of calibrate_expansions() against 0.063/0.10/0.16 M (FPN) and
  // 0.056/0.086/0.14 M (SSD); both variants land on the same factors.
  switch (width) {
    case 32:
      c.depth = 8;
      c.expansion = {1, 1, 1, 1, 1, 1, 2, 6};
      break;
    case 48:
      c.depth = 6;
      c.expansion = {1, 1, 1, 1, 1, 4};
      break;
    case 64:
      c.depth = 6;
      c.expansion = {1, 1, 1, 1, 1, 4};
      break;
    default:
      throw std::invalid_argument("no preset for width " + std::to_string(width) +
                                  " (presets: 32, 48, 64)");
  }
  return c;
}

namespace {

LayerDesc conv(std::string name, ConvSpec spec) {
  return {LayerKind::Conv, std::move(name), spec, spec.out_channels, ActKind::Relu};
}
LayerDesc bn(std::string name, int channels) {
  return {LayerKind::BatchNorm, std::move(name), {}, channels, ActKind::Relu};
}
LayerDesc act(std::string name, int channels, ActKind kind) {
  return {LayerKind::Activation, std::move(name), {}, channels, kind};
}

// conv -> BN -> activation
void conv_block(std::vector<LayerDesc>& out, const std::string& name, ConvSpec spec, ActKind kind) {
  out.push_back(conv(name, spec));
  out.push_back(bn(name + "_bn", spec.out_channels));
  out.push_back(act(name + "_act", spec.out_channels, kind));
}

}  // namespace

Architecture describe(const ModelConfig& config) {
  config.validate();
  const int c = config.width;
  const ActKind a = config.activation;
  Architecture arch;

  arch.entry.name = "E";
  conv_block(arch.entry.layers, "E.conv", ConvSpec::dense3x3(3, c, 2), ActKind::Relu);

  for (int b = 0; b < config.depth; ++b) {
    BlockDesc block;
    block.name = "F.ir" + std::to_string(b);
    const std::string p = block.name + ".";
    if (b == 0) {
      conv_block(block.layers, p + "dw", ConvSpec::depthwise(c), a);
      block.layers.push_back(conv(p + "project", ConvSpec::pointwise(c, c)));
      block.layers.push_back(bn(p + "project_bn", c));
    } else {
      const int hidden = c * config.expansion[b];
      conv_block(block.layers, p + "expand", ConvSpec::pointwise(c, hidden), a);
      conv_block(block.layers, p + "dw", ConvSpec::depthwise(hidden), a);
      block.layers.push_back(conv(p + "project", ConvSpec::pointwise(hidden, c)));
      block.layers.push_back(bn(p + "project_bn", c));
    }
    block.residual = true;  // stride 1 and equal widths throughout the IR stack
    arch.backbone.push_back(std::move(block));
  }
  BlockDesc down;
  down.name = "F.down";
  conv_block(down.layers, "F.down.conv", ConvSpec::dense3x3(c, c, 2), ActKind::Relu);
  arch.backbone.push_back(std::move(down));

  if (config.variant == Variant::Fpn) {
    for (int i = 1; i < config.levels; ++i) {
      BlockDesc up;
      up.name = "U" + std::to_string(i);
      up.layers.push_back({LayerKind::Upsample, up.name + ".up", {}, c, ActKind::Relu});
      conv_block(up.layers, up.name + ".dw", ConvSpec::depthwise(c), ActKind::Relu);
      conv_block(up.layers, up.name + ".pw", ConvSpec::pointwise(c, c), ActKind::Relu);
      arch.upsample.push_back(std::move(up));
    }
  }

  for (int l = 1; l <= config.levels; ++l) {
    HeadDesc h;
    h.name = "head" + std::to_string(l);
    h.maxout_bg = l == 1 ? 3 : 0;
    h.cls = ConvSpec::dense3x3(c, l == 1 ? 4 : 2, 1, true);
    h.reg = ConvSpec::dense3x3(c, 4, 1, true);
    arch.heads.push_back(h);
  }
  return arch;
}

bool is_running_stat(std::string_view name) {
  return name.find(".running_mean") != std::string_view::npos ||
         name.find(".running_var") != std::string_view::npos;
}

bool is_decay_exempt(std::string_view name) {
  auto ends = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.substr(name.size() - suffix.size()) == suffix;
  };
  return ends(".gamma") || ends(".beta") || ends(".slope") || is_running_stat(name);
}

std::string running_key(const std::string& layer, std::string_view stat, int pass) {
  std::string key = layer + "." + std::string(stat);
  if (pass >= 0) key += ".p" + std::to_string(pass + 1);
  return key;
}

template <typename T>
BasicTensor<T>& ModelParams<T>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
const BasicTensor<T>& ModelParams<T>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
bool ModelParams<T>::identical(const ModelParams& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  auto a = tensors.begin();
  auto b = other.tensors.begin();
  for (; a != tensors.end(); ++a, ++b) {
    if (a->first != b->first || !a->second.identical(b->second)) return false;
  }
  return true;
}

namespace {

Shape vec_shape(int c) { return {1, c, 1, 1}; }

bool in_backbone(const std::string& layer) { return layer.rfind("F.", 0) == 0; }

void add_layer_params(ModelParams<double>& p, const LayerDesc& layer, const ModelConfig& config,
                      std::mt19937_64& rng) {
  switch (layer.kind) {
    case LayerKind::Conv: {
      const ConvSpec& s = layer.conv;
      const double fan_in = static_cast<double>(s.in_channels / s.groups) * s.kernel_h * s.kernel_w;
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      TensorD w(s.weight_shape());
      for (auto& v : w.data()) v = dist(rng);
      p.tensors.emplace(layer.name + ".weight", std::move(w));
      if (s.has_bias) p.tensors.emplace(layer.name + ".bias", TensorD(vec_shape(s.out_channels)));
      break;
    }
    case LayerKind::BatchNorm: {
      const int c = layer.channels;
      p.tensors.emplace(layer.name + ".gamma", TensorD(vec_shape(c), 1.0));
      p.tensors.emplace(layer.name + ".beta", TensorD(vec_shape(c), 0.0));
      if (config.bn_per_pass && in_backbone(layer.name)) {
        for (int pass = 0; pass < config.levels; ++pass) {
          p.tensors.emplace(running_key(layer.name, "running_mean", pass), TensorD(vec_shape(c), 0.0));
          p.tensors.emplace(running_key(layer.name, "running_var", pass), TensorD(vec_shape(c), 1.0));
        }
      } else {
        p.tensors.emplace(running_key(layer.name, "running_mean"), TensorD(vec_shape(c), 0.0));
        p.tensors.emplace(running_key(layer.name, "running_var"), TensorD(vec_shape(c), 1.0));
      }
      break;
    }
    case LayerKind::Activation:
      if (layer.act == ActKind::PRelu) {
        p.tensors.emplace(layer.name + ".slope", TensorD(vec_shape(layer.channels), kNegativeSlope));
      }
      break;
    case LayerKind::Upsample:
      break;
  }
}

}  // namespace

template <typename T>
ModelParams<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  const Architecture arch = describe(config);
  std::mt19937_64 rng(seed);
  ModelParams<double> p;
  for (const auto& l : arch.entry.layers) add_layer_params(p, l, config, rng);
  for (const auto& b : arch.backbone)
    for (const auto& l : b.layers) add_layer_params(p, l, config, rng);
  for (const auto& b : arch.upsample)
    for (const auto& l : b.layers) add_layer_params(p, l, config, rng);
  for (const auto& h : arch.heads) {
    add_layer_params(p, conv(h.name + ".cls", h.cls), config, rng);
    add_layer_params(p, conv(h.name + ".reg", h.reg), config, rng);
  }
  if constexpr (std::is_same_v<T, double>) {
    return p;
  } else {
    return p.template cast<T>();
  }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::span<const T> vec(const ModelParams<T>& p, const std::string& key) {
  return p.at(key).data();
}

// The training path updates running statistics; inference never writes them,
// so the const store can back the mutable spans there.
template <typename T>
BatchNormState<T> bn_state(ModelParams<T>& p, const LayerDesc& layer, const ModelConfig& config,
                           const RunOptions& opt, int pass) {
  const int key_pass = config.bn_per_pass && in_backbone(layer.name) ? pass : -1;
  BatchNormState<T> st;
  st.gamma = p.at(layer.name + ".gamma").data();
  st.beta = p.at(layer.name + ".beta").data();
  st.running_mean = p.at(running_key(layer.name, "running_mean", key_pass)).data();
  st.running_var = p.at(running_key(layer.name, "running_var", key_pass)).data();
  st.momentum = opt.bn_momentum;
  st.eps = opt.bn_eps;
  st.mode = opt.mode;
  return st;
}

template <typename T>
std::span<const T> conv_bias(const ModelParams<T>& p, const LayerDesc& layer) {
  if (!layer.conv.has_bias) return {};
  return vec(p, layer.name + ".bias");
}

template <typename T>
std::span<const T> slopes_of(const ModelParams<T>& p, const LayerDesc& layer) {
  if (layer.act != ActKind::PRelu) return {};
  return vec(p, layer.name + ".slope");
}

template <typename T>
BasicTensor<T> run_layer(ModelParams<T>& p, const ModelConfig& config, const LayerDesc& layer,
                         const BasicTensor<T>& x, const RunOptions& opt, int pass,
                         LayerTrace<T>* trace) {
  if (trace) trace->input = x;
  switch (layer.kind) {
    case LayerKind::Conv:
      return conv2d(x, p.at(layer.name + ".weight"), layer.conv, conv_bias(p, layer));
    case LayerKind::BatchNorm: {
      BatchNormState<T> st = bn_state(p, layer, config, opt, pass);
      return batch_norm(x, st, trace ? &trace->bn : nullptr);
    }
    case LayerKind::Activation:
      return activation(x, layer.act, slopes_of(p, layer));
    case LayerKind::Upsample:
      return upsample_bilinear_x2(x);
  }
  return x;
}

template <typename T>
BasicTensor<T> run_block(ModelParams<T>& p, const ModelConfig& config, const BlockDesc& block,
                         const BasicTensor<T>& x, const RunOptions& opt, int pass,
                         BlockTrace<T>* trace) {
  if (trace) trace->layers.assign(block.layers.size(), {});
  BasicTensor<T> y = x;
  for (std::size_t i = 0; i < block.layers.size(); ++i) {
    y = run_layer(p, config, block.layers[i], y, opt, pass, trace ? &trace->layers[i] : nullptr);
  }
  if (block.residual) add_into(y, x);
  return y;
}

template <typename T>
void accumulate(ParamGrads<T>& grads, const std::string& key, const BasicTensor<T>& g) {
  auto it = grads.find(key);
  if (it == grads.end()) {
    grads.emplace(key, g);
  } else {
    add_into(it->second, g);
  }
}

template <typename T>
void accumulate(ParamGrads<T>& grads, const std::string& key, const std::vector<T>& g) {
  accumulate(grads, key, BasicTensor<T>(Shape{1, static_cast<int>(g.size()), 1, 1}, g));
}

template <typename T>
BasicTensor<T> layer_backward(const ModelParams<T>& p, const LayerDesc& layer,
                              const LayerTrace<T>& trace, const BasicTensor<T>& g,
                              ParamGrads<T>& grads) {
  switch (layer.kind) {
    case LayerKind::Conv: {
      auto cg = conv2d_vjp(trace.input, p.at(layer.name + ".weight"), layer.conv, g);
      accumulate(grads, layer.name + ".weight", cg.weights);
      if (layer.conv.has_bias) accumulate(grads, layer.name + ".bias", cg.bias);
      return std::move(cg.input);
    }
    case LayerKind::BatchNorm: {
      auto bg = batch_norm_vjp(trace.bn, vec(p, layer.name + ".gamma"), g);
      accumulate(grads, layer.name + ".gamma", bg.gamma);
      accumulate(grads, layer.name + ".beta", bg.beta);
      return std::move(bg.input);
    }
    case LayerKind::Activation: {
      auto ag = activation_vjp(trace.input, layer.act, slopes_of(p, layer), g);
      if (layer.act == ActKind::PRelu) accumulate(grads, layer.name + ".slope", ag.slopes);
      return std::move(ag.input);
    }
    case LayerKind::Upsample:
      return upsample_bilinear_x2_vjp(trace.input.shape(), g);
  }
  return g;
}

template <typename T>
BasicTensor<T> block_backward(const ModelParams<T>& p, const BlockDesc& block,
                              const BlockTrace<T>& trace, const BasicTensor<T>& g,
                              ParamGrads<T>& grads) {
  BasicTensor<T> cur = g;
  for (std::size_t i = block.layers.size(); i-- > 0;) {
    cur = layer_backward(p, block.layers[i], trace.layers[i], cur, grads);
  }
  if (block.residual) add_into(cur, g);
  return cur;
}

void check_input(const ModelConfig& config, const Shape& s) {
  if (s.c != 3) throw std::invalid_argument("image must have 3 channels, got " + std::to_string(s.c));
  const int m = config.size_multiple();
  if (s.h % m != 0 || s.w % m != 0) {
    throw std::invalid_argument("image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                " is not divisible by " + std::to_string(m) + "; pad it first");
  }
}

template <typename T>
ModelParams<T>& writable(const ModelParams<T>& p) {
  return const_cast<ModelParams<T>&>(p);
}

template <typename T>
PyramidFeatures<T> run_backbone(ModelParams<T>& p, const ModelConfig& config,
                                const Architecture& arch, const BasicTensor<T>& image,
                                const RunOptions& opt, ForwardTrace<T>* trace) {
  check_input(config, image.shape());
  PyramidFeatures<T> out;
  BasicTensor<T> f =
      run_block(p, config, arch.entry, image, opt, -1, trace ? &trace->entry : nullptr);
  if (trace) trace->passes.assign(config.levels, std::vector<BlockTrace<T>>(arch.backbone.size()));
  for (int pass = 0; pass < config.levels; ++pass) {
    for (std::size_t b = 0; b < arch.backbone.size(); ++b) {
      f = run_block(p, config, arch.backbone[b], f, opt, pass,
                    trace ? &trace->passes[pass][b] : nullptr);
    }
    out.maps.push_back(f);
    out.strides.push_back(1 << (pass + 2));
  }
  if (trace) {
    trace->feature_shapes.clear();
    for (const auto& m : out.maps) trace->feature_shapes.push_back(m.shape());
  }
  return out;
}

template <typename T>
PyramidFeatures<T> run_fpn(ModelParams<T>& p, const ModelConfig& config, const Architecture& arch,
                           const PyramidFeatures<T>& f, const RunOptions& opt,
                           ForwardTrace<T>* trace) {
  const int n = static_cast<int>(f.maps.size());
  if (n != config.levels) throw std::invalid_argument("fpn_combine: expected one map per level");
  PyramidFeatures<T> g;
  g.maps.push_back(f.maps[n - 1]);
  g.strides.push_back(f.strides[n - 1]);
  if (trace) trace->upsample.assign(arch.upsample.size(), {});
  for (int i = 1; i < n; ++i) {
    BasicTensor<T> up = run_block(p, config, arch.upsample[i - 1], g.maps.back(), opt, -1,
                                  trace ? &trace->upsample[i - 1] : nullptr);
    const BasicTensor<T>& skip = f.maps[n - 1 - i];
    if (!(up.shape() == skip.shape())) {
      throw std::invalid_argument("fpn_combine: U" + std::to_string(i) + " output " +
                                  up.shape().str() + " does not match f_" + std::to_string(n - i) +
                                  " " + skip.shape().str());
    }
    add_into(up, skip);
    g.maps.push_back(std::move(up));
    g.strides.push_back(f.strides[n - 1 - i]);
  }
  return g;
}

// Maps ordered finest first.
template <typename T>
std::vector<const BasicTensor<T>*> by_level(const PyramidFeatures<T>& pyr) {
  std::vector<std::size_t> order(pyr.maps.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return pyr.strides[a] < pyr.strides[b]; });
  std::vector<const BasicTensor<T>*> out;
  for (auto i : order) out.push_back(&pyr.maps[i]);
  return out;
}

template <typename T>
std::vector<HeadOutput<T>> run_heads(const ModelParams<T>& p, const ModelConfig& config,
                                     const Architecture& arch, const PyramidFeatures<T>& pyr,
                                     ForwardTrace<T>* trace) {
  if (pyr.maps.size() != arch.heads.size()) {
    throw std::invalid_argument("heads_forward: pyramid has " + std::to_string(pyr.maps.size()) +
                                " maps, model has " + std::to_string(arch.heads.size()) + " heads");
  }
  const auto maps = by_level(pyr);
  std::vector<HeadOutput<T>> out;
  if (trace) trace->heads.assign(arch.heads.size(), {});
  for (std::size_t l = 0; l < arch.heads.size(); ++l) {
    const HeadDesc& h = arch.heads[l];
    const BasicTensor<T>& x = *maps[l];
    if (x.c() != config.width) {
      throw std::invalid_argument("heads_forward: level " + std::to_string(l + 1) + " has " +
                                  std::to_string(x.c()) + " channels, expected " +
                                  std::to_string(config.width));
    }
    BasicTensor<T> cls = conv2d(x, p.at(h.name + ".cls.weight"), h.cls, vec(p, h.name + ".cls.bias"));
    BasicTensor<T> reg = conv2d(x, p.at(h.name + ".reg.weight"), h.reg, vec(p, h.name + ".reg.bias"));
    if (trace) trace->heads[l].input = x;
    if (h.maxout_bg > 0) {
      if (trace) trace->heads[l].cls_raw = cls;
      cls = maxout_pairless(cls, h.maxout_bg);
    }
    out.push_back({std::move(cls), std::move(reg)});
  }
  return out;
}

}  // namespace

template <typename T>
PyramidFeatures<T> iterate_features(const ModelParams<T>& params, const ModelConfig& config,
                                    const BasicTensor<T>& image) {
  const Architecture arch = describe(config);
  return run_backbone(writable(params), config, arch, image, RunOptions{}, static_cast<ForwardTrace<T>*>(nullptr));
}

template <typename T>
PyramidFeatures<T> fpn_combine(const ModelParams<T>& params, const ModelConfig& config,
                               const PyramidFeatures<T>& features) {
  const Architecture arch = describe(config);
  if (arch.upsample.empty()) throw std::invalid_argument("fpn_combine: model has no upsample blocks");
  return run_fpn(writable(params), config, arch, features, RunOptions{}, static_cast<ForwardTrace<T>*>(nullptr));
}

template <typename T>
std::vector<HeadOutput<T>> heads_forward(const ModelParams<T>& params, const ModelConfig& config,
                                         const PyramidFeatures<T>& pyramid) {
  const Architecture arch = describe(config);
  return run_heads(params, config, arch, pyramid, static_cast<ForwardTrace<T>*>(nullptr));
}

template <typename T>
std::vector<HeadOutput<T>> forward(ModelParams<T>& params, const ModelConfig& config,
                                   const BasicTensor<T>& image, const RunOptions& options,
                                   ForwardTrace<T>* trace) {
  const Architecture arch = describe(config);
  PyramidFeatures<T> f = run_backbone(params, config, arch, image, options, trace);
  if (config.variant == Variant::Fpn) f = run_fpn(params, config, arch, f, options, trace);
  return run_heads(params, config, arch, f, trace);
}

template <typename T>
std::vector<HeadOutput<T>> infer(const ModelParams<T>& params, const ModelConfig& config,
                                 const BasicTensor<T>& image) {
  return forward(writable(params), config, image, RunOptions{}, static_cast<ForwardTrace<T>*>(nullptr));
}

template <typename T>
ParamGrads<T> backward(const ModelParams<T>& params, const ModelConfig& config,
                       const ForwardTrace<T>& trace, const std::vector<HeadOutput<T>>& head_grads) {
  const Architecture arch = describe(config);
  const int n = config.levels;
  if (head_grads.size() != arch.heads.size() || trace.heads.size() != arch.heads.size()) {
    throw std::invalid_argument("backward: head gradient count mismatch");
  }
  ParamGrads<T> grads;

  // Heads: gradient w.r.t. each level's feature map, finest first.
  std::vector<BasicTensor<T>> level_grad;
  for (std::size_t l = 0; l < arch.heads.size(); ++l) {
    const HeadDesc& h = arch.heads[l];
    const HeadTrace<T>& ht = trace.heads[l];
    BasicTensor<T> gcls = head_grads[l].cls;
    if (h.maxout_bg > 0) gcls = maxout_pairless_vjp(ht.cls_raw, h.maxout_bg, gcls);
    auto cg = conv2d_vjp(ht.input, params.at(h.name + ".cls.weight"), h.cls, gcls);
    auto rg = conv2d_vjp(ht.input, params.at(h.name + ".reg.weight"), h.reg, head_grads[l].reg);
    accumulate(grads, h.name + ".cls.weight", cg.weights);
    accumulate(grads, h.name + ".cls.bias", cg.bias);
    accumulate(grads, h.name + ".reg.weight", rg.weights);
    accumulate(grads, h.name + ".reg.bias", rg.bias);
    add_into(cg.input, rg.input);
    level_grad.push_back(std::move(cg.input));
  }

  // df[i] is the gradient w.r.t. f_{i+1}.
  std::vector<BasicTensor<T>> df(n);
  if (config.variant == Variant::Ssd) {
    for (int i = 0; i < n; ++i) df[i] = std::move(level_grad[i]);
  } else {
    for (int i = 0; i < n; ++i) df[i] = BasicTensor<T>(trace.feature_shapes[i]);
    // g_k (1-based) sits at level N + 1 - k.
    std::vector<BasicTensor<T>> dg(n);
    for (int k = 1; k <= n; ++k) dg[k - 1] = std::move(level_grad[n - k]);
    for (int i = n - 1; i >= 1; --i) {
      // g_{i+1} = U_i(g_i) + f_{N-i}
      add_into(df[n - i - 1], dg[i]);
      BasicTensor<T> back = block_backward(params, arch.upsample[i - 1], trace.upsample[i - 1], dg[i], grads);
      add_into(dg[i - 1], back);
    }
    add_into(df[n - 1], dg[0]);  // g_1 = f_N
  }

  // Backbone passes in reverse; f_i feeds pass i+1 and its own head.
  BasicTensor<T> carry;
  for (int pass = n - 1; pass >= 0; --pass) {
    BasicTensor<T> g = std::move(df[pass]);
    if (pass < n - 1) add_into(g, carry);
    for (std::size_t b = arch.backbone.size(); b-- > 0;) {
      g = block_backward(params, arch.backbone[b], trace.passes[pass][b], g, grads);
    }
    carry = std::move(g);
  }
  block_backward(params, arch.entry, trace.entry, carry, grads);
  return grads;
}

#define EXTD_INSTANTIATE_MODEL(T)                                                                \
  template struct ModelParams<T>;                                                                \
  template ModelParams<T> build_model<T>(const ModelConfig&, std::uint64_t);                     \
  template PyramidFeatures<T> iterate_features(const ModelParams<T>&, const ModelConfig&,        \
                                               const BasicTensor<T>&);                           \
  template PyramidFeatures<T> fpn_combine(const ModelParams<T>&, const ModelConfig&,             \
                                          const PyramidFeatures<T>&);                            \
  template std::vector<HeadOutput<T>> heads_forward(const ModelParams<T>&, const ModelConfig&,   \
                                                    const PyramidFeatures<T>&);                  \
  template std::vector<HeadOutput<T>> forward(ModelParams<T>&, const ModelConfig&,               \
                                              const BasicTensor<T>&, const RunOptions&,          \
                                              ForwardTrace<T>*);                                 \
  template std::vector<HeadOutput<T>> infer(const ModelParams<T>&, const ModelConfig&,           \
                                            const BasicTensor<T>&);                              \
  template ParamGrads<T> backward(const ModelParams<T>&, const ModelConfig&,                     \
                                  const ForwardTrace<T>&, const std::vector<HeadOutput<T>>&);

EXTD_INSTANTIATE_MODEL(float)
EXTD_INSTANTIATE_MODEL(double)

#undef EXTD_INSTANTIATE_MODEL

}  // namespace extd
