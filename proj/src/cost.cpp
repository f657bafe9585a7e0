#include "extd/cost.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace extd {

namespace {

using i64 = std::int64_t;

struct Item {
  std::string name;
  i64 params = 0;
  i64 madds = 0;
};

i64 conv_params(const ConvSpec& s) {
  i64 p = static_cast<i64>(s.out_channels) * (s.in_channels / s.groups) * s.kernel_h * s.kernel_w;
  if (s.has_bias) p += s.out_channels;
  return p;
}

i64 conv_madds(const ConvSpec& s, int& h, int& w) {
  h = (h + 2 * s.padding - s.kernel_h) / s.stride + 1;
  w = (w + 2 * s.padding - s.kernel_w) / s.stride + 1;
  return static_cast<i64>(h) * w * s.out_channels * (s.in_channels / s.groups) * s.kernel_h *
         s.kernel_w;
}

// Walks one block from an (h, w) input, updating the dims in place.
std::vector<Item> walk_block(const BlockDesc& block, int& h, int& w, bool ew) {
  std::vector<Item> out;
  int c = 0;
  for (const auto& layer : block.layers) {
    Item it;
    it.name = layer.name;
    switch (layer.kind) {
      case LayerKind::Conv:
        it.params = conv_params(layer.conv);
        it.madds = conv_madds(layer.conv, h, w);
        c = layer.conv.out_channels;
        break;
      case LayerKind::BatchNorm:
        it.params = 2 * static_cast<i64>(layer.channels);
        c = layer.channels;
        if (ew) it.madds = static_cast<i64>(c) * h * w;
        break;
      case LayerKind::Activation:
        it.params = layer.act == ActKind::PRelu ? layer.channels : 0;
        c = layer.channels;
        if (ew) it.madds = static_cast<i64>(c) * h * w;
        break;
      case LayerKind::Upsample:
        h *= 2;
        w *= 2;
        c = layer.channels;
        if (ew) it.madds = static_cast<i64>(c) * h * w;
        break;
    }
    out.push_back(std::move(it));
  }
  if (block.residual) out.push_back({block.name + ".add", 0, ew ? static_cast<i64>(c) * h * w : 0});
  return out;
}

std::vector<Item> walk_head(const HeadDesc& head, int h, int w, bool ew) {
  std::vector<Item> out;
  int hh = h, ww = w;
  out.push_back({head.name + ".cls", conv_params(head.cls), conv_madds(head.cls, hh, ww)});
  if (head.maxout_bg > 0) out.push_back({head.name + ".maxout", 0, ew ? static_cast<i64>(hh) * ww : 0});
  hh = h;
  ww = w;
  out.push_back({head.name + ".reg", conv_params(head.reg), conv_madds(head.reg, hh, ww)});
  return out;
}

void append(CostReport& r, const std::string& group, const std::vector<Item>& items) {
  for (const auto& it : items) {
    CostRow row;
    row.name = it.name;
    row.group = group;
    row.params = it.params;
    row.madds_per_pass = {it.madds};
    r.rows.push_back(std::move(row));
  }
}

void finish(CostReport& r) {
  r.params = 0;
  r.madds = 0;
  for (auto& row : r.rows) {
    row.total_madds = 0;
    for (i64 m : row.madds_per_pass) row.total_madds += m;
    r.params += row.params;
    r.madds += row.total_madds;
  }
}

std::string with_commas(i64 v) {
  std::string s = std::to_string(v < 0 ? -v : v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return v < 0 ? "-" + s : s;
}

}  // namespace

template <typename T>
std::int64_t count_params(const ModelParams<T>& params) {
  i64 n = 0;
  for (const auto& [name, t] : params.tensors)
    if (!is_running_stat(name)) n += static_cast<i64>(t.size());
  return n;
}

template std::int64_t count_params(const ModelParams<float>&);
template std::int64_t count_params(const ModelParams<double>&);

CostReport count_madds(const ModelConfig& config, int input_h, int input_w, const CostOptions& o) {
  const Architecture arch = describe(config);
  const int m = config.size_multiple();
  if (input_h <= 0 || input_w <= 0 || input_h % m != 0 || input_w % m != 0) {
    throw std::invalid_argument("count_madds: input " + std::to_string(input_h) + "x" +
                                std::to_string(input_w) + " is not divisible by " + std::to_string(m));
  }
  const bool ew = o.include_elementwise;
  CostReport r;
  r.model = config.name();
  r.input_h = input_h;
  r.input_w = input_w;
  r.elementwise = ew;

  int h = input_h, w = input_w;
  append(r, "E", walk_block(arch.entry, h, w, ew));

  // The shared backbone: parameters once, one madds entry per pass.
  const std::size_t first_f = r.rows.size();
  std::vector<std::pair<int, int>> level_dims;
  for (int pass = 0; pass < config.levels; ++pass) {
    std::vector<Item> items;
    for (const auto& block : arch.backbone) {
      auto part = walk_block(block, h, w, ew);
      items.insert(items.end(), part.begin(), part.end());
    }
    if (pass == 0) {
      append(r, "F", items);
    } else {
      for (std::size_t i = 0; i < items.size(); ++i) r.rows[first_f + i].madds_per_pass.push_back(items[i].madds);
    }
    level_dims.emplace_back(h, w);
  }

  // U_i lifts g_i (at level N-i+1) to level N-i, then adds the skip.
  for (std::size_t i = 0; i < arch.upsample.size(); ++i) {
    auto [uh, uw] = level_dims[level_dims.size() - 1 - i];
    auto items = walk_block(arch.upsample[i], uh, uw, ew);
    items.push_back({arch.upsample[i].name + ".add", 0,
                     ew ? static_cast<i64>(config.width) * uh * uw : 0});
    append(r, "U", items);
  }

  for (std::size_t l = 0; l < arch.heads.size(); ++l) {
    append(r, "heads", walk_head(arch.heads[l], level_dims[l].first, level_dims[l].second, ew));
  }
  finish(r);
  return r;
}

std::int64_t count_params(const ModelConfig& config) {
  const Architecture arch = describe(config);
  i64 n = 0;
  int h = 0, w = 0;
  auto add_block = [&](const BlockDesc& b) {
    for (const auto& it : walk_block(b, h, w, false)) n += it.params;
  };
  add_block(arch.entry);
  for (const auto& b : arch.backbone) add_block(b);
  for (const auto& b : arch.upsample) add_block(b);
  for (const auto& hd : arch.heads) n += conv_params(hd.cls) + conv_params(hd.reg);
  return n;
}

namespace {

LayerDesc conv_layer(const std::string& name, ConvSpec spec) {
  return {LayerKind::Conv, name, spec, 0, ActKind::Relu};
}
LayerDesc bn_layer(const std::string& name, int c) { return {LayerKind::BatchNorm, name, {}, c, ActKind::Relu}; }
LayerDesc act_layer(const std::string& name, int c, ActKind a) {
  return {LayerKind::Activation, name, {}, c, a};
}

void conv_bn_act(std::vector<LayerDesc>& out, const std::string& name, ConvSpec spec, ActKind a) {
  out.push_back(conv_layer(name, spec));
  out.push_back(bn_layer(name + "_bn", spec.out_channels));
  out.push_back(act_layer(name + "_act", spec.out_channels, a));
}

}  // namespace

PlainNetwork describe_s3fd_mobilefacenet() {
  struct Row {
    char type;
    int out, hidden, stride;
  };
  static constexpr Row table[14] = {
      {'a', 64, 64, 2},   {'b', 64, 128, 1},  {'b', 64, 128, 1},  {'b', 64, 128, 1},
      {'b', 64, 128, 1},  {'b', 64, 128, 2},  {'b', 128, 256, 2}, {'b', 128, 256, 1},
      {'b', 128, 256, 1}, {'b', 128, 256, 1}, {'b', 128, 256, 1}, {'b', 128, 256, 1},
      {'b', 128, 256, 1}, {'b', 128, 512, 2}};
  const ActKind a = ActKind::PRelu;

  PlainNetwork net;
  net.name = "S3FD-MobileFaceNet";
  BlockDesc entry;
  entry.name = "entry";
  conv_bn_act(entry.layers, "entry.conv", ConvSpec::dense3x3(3, 64, 1), a);
  net.stages.push_back({"entry", std::move(entry)});

  int c = 64;
  for (int i = 0; i < 14; ++i) {
    const Row& t = table[i];
    BlockDesc b;
    b.name = "block" + std::to_string(i + 1);
    const std::string p = b.name + ".";
    if (t.type == 'a') {
      conv_bn_act(b.layers, p + "dw", ConvSpec::depthwise(c, t.stride), a);
    } else {
      conv_bn_act(b.layers, p + "expand", ConvSpec::pointwise(c, t.hidden), a);
      conv_bn_act(b.layers, p + "dw", ConvSpec::depthwise(t.hidden, t.stride), a);
    }
    const int hidden = t.type == 'a' ? c : t.hidden;
    b.layers.push_back(conv_layer(p + "project", ConvSpec::pointwise(hidden, t.out)));
    b.layers.push_back(bn_layer(p + "project_bn", t.out));
    b.residual = t.stride == 1 && c == t.out;
    c = t.out;
    net.stages.push_back({"backbone", std::move(b)});
  }
  for (int i = 1; i <= 3; ++i) {
    BlockDesc b;
    b.name = "extra" + std::to_string(i);
    conv_bn_act(b.layers, b.name + ".conv", ConvSpec::dense3x3(128, 128, 2), ActKind::Relu);
    net.stages.push_back({"extra", std::move(b)});
  }

  // Stage indices: 0 entry, 1..14 blocks, 15..17 extras.
  const int attach[6] = {6, 7, 14, 15, 16, 17};
  for (int l = 0; l < 6; ++l) {
    HeadDesc h;
    h.name = "head" + std::to_string(l + 1);
    const int in = l == 0 ? 64 : 128;
    h.maxout_bg = l == 0 ? 3 : 0;
    h.cls = ConvSpec::dense3x3(in, l == 0 ? 4 : 2, 1, true);
    h.reg = ConvSpec::dense3x3(in, 4, 1, true);
    net.heads.emplace_back(attach[l], h);
  }
  return net;
}

CostReport count_madds(const PlainNetwork& net, int input_h, int input_w, const CostOptions& o) {
  if (input_h <= 0 || input_w <= 0) throw std::invalid_argument("count_madds: empty input");
  const bool ew = o.include_elementwise;
  CostReport r;
  r.model = net.name;
  r.input_h = input_h;
  r.input_w = input_w;
  r.elementwise = ew;
  std::vector<std::pair<int, int>> dims;
  int h = input_h, w = input_w;
  for (const auto& s : net.stages) {
    append(r, s.group, walk_block(s.block, h, w, ew));
    dims.emplace_back(h, w);
  }
  for (const auto& [at, head] : net.heads) {
    if (at < 0 || at >= static_cast<int>(dims.size())) {
      throw std::invalid_argument("count_madds: head " + head.name + " attaches to missing stage");
    }
    append(r, "heads", walk_head(head, dims[static_cast<std::size_t>(at)].first,
                                 dims[static_cast<std::size_t>(at)].second, ew));
  }
  finish(r);
  return r;
}

std::vector<CostGroup> CostReport::groups() const {
  std::vector<CostGroup> out;
  for (const auto& row : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const CostGroup& g) { return g.name == row.group; });
    if (it == out.end()) {
      out.push_back({row.group, 0, 0});
      it = out.end() - 1;
    }
    it->params += row.params;
    it->madds += row.total_madds;
  }
  return out;
}

std::string CostReport::table() const {
  std::size_t nw = 5;
  for (const auto& row : rows) nw = std::max(nw, row.name.size());
  std::ostringstream os;
  char buf[256];
  os << model << " @ " << input_w << "x" << input_h
     << (elementwise ? " (conv + elementwise madds)\n" : " (conv madds)\n");
  std::snprintf(buf, sizeof buf, "%-*s %12s %6s %16s %16s\n", static_cast<int>(nw), "layer", "params",
                "passes", "madds/pass1", "total madds");
  os << buf;
  std::string group;
  for (const auto& row : rows) {
    if (row.group != group) {
      group = row.group;
      os << "[" << group << "]\n";
    }
    std::snprintf(buf, sizeof buf, "%-*s %12s %6d %16s %16s\n", static_cast<int>(nw), row.name.c_str(),
                  with_commas(row.params).c_str(), row.passes(),
                  with_commas(row.madds_per_pass.front()).c_str(), with_commas(row.total_madds).c_str());
    os << buf;
  }
  os << "\n";
  for (const auto& g : groups()) {
    std::snprintf(buf, sizeof buf, "subtotal %-8s %12s params %16s madds\n", g.name.c_str(),
                  with_commas(g.params).c_str(), with_commas(g.madds).c_str());
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "total    %-8s %12s params %16s madds (%.4f M params, %.3f G madds)\n", "",
                with_commas(params).c_str(), with_commas(madds).c_str(), params / 1e6, madds / 1e9);
  os << buf;
  return os.str();
}

std::string CostReport::lines() const {
  std::ostringstream os;
  for (const auto& row : rows) {
    os << row.name << ' ' << row.params << ' ';
    for (std::size_t i = 0; i < row.madds_per_pass.size(); ++i) os << (i ? "," : "") << row.madds_per_pass[i];
    os << ' ' << row.passes() << ' ' << row.total_madds << '\n';
  }
  return os.str();
}

std::vector<int> calibrate_expansions(std::int64_t target, const ModelConfig& skeleton) {
  ModelConfig c = skeleton;
  if (c.depth < 2) throw std::invalid_argument("calibrate_expansions: depth must be >= 2");
  if (target <= 0) throw std::invalid_argument("calibrate_expansions: target must be positive");
  c.expansion.assign(static_cast<std::size_t>(c.depth), 1);
  const i64 base = count_params(c);
  c.expansion.back() = 2;
  const i64 step = count_params(c) - base;  // every expanded block is linear in its factor

  std::vector<int> e(static_cast<std::size_t>(c.depth), 1), best;
  i64 best_err = -1;
  const int free = c.depth - 1;
  while (true) {
    int extra = 0;
    for (int i = 1; i <= free; ++i) extra += e[static_cast<std::size_t>(i)] - 1;
    const i64 err = std::llabs(base + step * extra - target);
    if (best_err < 0 || err < best_err) {
      best_err = err;
      best = e;
    }
    // Odometer in lexicographic order.
    int i = free;
    while (i >= 1 && e[static_cast<std::size_t>(i)] == 6) e[static_cast<std::size_t>(i--)] = 1;
    if (i < 1) break;
    ++e[static_cast<std::size_t>(i)];
  }
  c.expansion = best;
  const i64 got = count_params(c);
  if (static_cast<double>(std::llabs(got - target)) > 0.1 * static_cast<double>(target)) {
    throw std::invalid_argument("calibrate_expansions: closest configuration has " + std::to_string(got) +
                                " parameters, more than 10% from " + std::to_string(target));
  }
  return best;
}

}  // namespace extd
