#include "extd/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>

namespace extd {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t j = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > j) out.push_back(line.substr(j, i - j));
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view l = text.substr(start, end - start);
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
    lines.push_back(l);
    start = end + 1;
  }
  return lines;
}

bool to_double(std::string_view s, double& v) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return ec == std::errc() && p == s.data() + s.size() && std::isfinite(v);
}

template <typename I>
bool to_int(std::string_view s, I& v) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return ec == std::errc() && p == s.data() + s.size();
}

std::string shortest(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string at_line(std::size_t line) { return "line " + std::to_string(line + 1) + ": "; }

// --- little-endian primitives ---

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  std::string_view bytes;
  std::size_t at = 0;

  void need(std::size_t n, const char* what) const {
    if (bytes.size() - at < n) {
      throw DataError(std::string("weight file truncated while reading ") + what + " at byte " +
                      std::to_string(at));
    }
  }
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    at += sizeof(U);
    return v;
  }
};

bool is_vector_param(const std::string& name, const Shape& s) {
  return s.n == 1 && s.h == 1 && s.w == 1 && !name.ends_with(".weight");
}

}  // namespace

// --- NetPBM ---------------------------------------------------------------

Tensor decode_netpbm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw DataError("not a binary NetPBM image (expected P5 or P6 magic)");
  }
  const bool color = bytes[1] == '6';
  std::size_t at = 2;
  int fields[3];
  for (int& f : fields) {
    // Whitespace and comments between header fields.
    while (at < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[at]))) {
        ++at;
      } else if (bytes[at] == '#') {
        while (at < bytes.size() && bytes[at] != '\n') ++at;
      } else {
        break;
      }
    }
    const std::size_t start = at;
    while (at < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[at]))) ++at;
    if (at == start || !to_int(bytes.substr(start, at - start), f)) {
      throw DataError("malformed NetPBM header");
    }
  }
  if (at >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[at]))) {
    throw DataError("malformed NetPBM header");
  }
  ++at;
  const int w = fields[0], h = fields[1], maxval = fields[2];
  if (w <= 0 || h <= 0) throw DataError("NetPBM image has zero size");
  if (maxval != 255) throw DataError("unsupported NetPBM maxval " + std::to_string(maxval) + " (need 255)");
  const std::size_t ch = color ? 3 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * h * ch;
  if (bytes.size() - at < need) {
    throw DataError("NetPBM payload truncated: " + std::to_string(bytes.size() - at) + " of " +
                    std::to_string(need) + " bytes");
  }
  Tensor img(1, 3, h, w);
  const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + at);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const std::size_t k = (static_cast<std::size_t>(y) * w + x) * ch + (color ? c : 0);
        img.at(0, c, y, x) = static_cast<float>(px[k]) / 255.0f;
      }
  return img;
}

std::string encode_ppm(const Tensor& image) {
  if (image.n() != 1 || image.c() != 3) {
    throw std::invalid_argument("encode_ppm: expected 1x3xHxW, got " + image.shape().str());
  }
  std::string out = "P6\n" + std::to_string(image.w()) + " " + std::to_string(image.h()) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(image.h()) * image.w() * 3);
  for (int y = 0; y < image.h(); ++y)
    for (int x = 0; x < image.w(); ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(0, c, y, x), 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
  return out;
}

Tensor load_image(const fs::path& path) {
  try {
    return decode_netpbm(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_image(const fs::path& path, const Tensor& image) { write_file(path, encode_ppm(image)); }

// --- weight file ----------------------------------------------------------

template <typename T>
std::string encode_weights(const ModelParams<T>& params) {
  std::string out = "EXTD";
  put<std::uint32_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    if (name.size() > 0xffff) throw std::invalid_argument("weight name too long: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    const Shape s = t.shape();
    if (is_vector_param(name, s)) {
      put<std::uint8_t>(out, 1);
      put<std::uint32_t>(out, static_cast<std::uint32_t>(s.c));
    } else {
      put<std::uint8_t>(out, 4);
      for (int d : {s.n, s.c, s.h, s.w}) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    put<std::uint8_t>(out, sizeof(T) == 4 ? 0 : 1);
    for (T v : t.data()) {
      if constexpr (sizeof(T) == 4) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put(out, bits);
      } else {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put(out, bits);
      }
    }
  }
  return out;
}

template <typename T>
ModelParams<T> decode_weights(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "EXTD") throw DataError("not a weight file (bad magic)");
  Reader r{bytes, 4};
  const auto version = r.get<std::uint32_t>("version");
  if (version != 1) throw DataError("unsupported weight file version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");
  ModelParams<T> params;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.get<std::uint16_t>("name length");
    r.need(len, "name");
    std::string name(bytes.substr(r.at, len));
    r.at += len;
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank != 1 && rank != 4) {
      throw DataError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    }
    std::uint32_t dims[4];
    for (int i = 0; i < rank; ++i) dims[i] = r.get<std::uint32_t>("dims");
    const Shape shape = rank == 1 ? Shape{1, static_cast<int>(dims[0]), 1, 1}
                                  : Shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                                          static_cast<int>(dims[2]), static_cast<int>(dims[3])};
    const auto kind = r.get<std::uint8_t>("element kind");
    if (kind > 1) throw DataError("tensor '" + name + "' has unknown element kind " + std::to_string(kind));
    const std::size_t width = kind == 0 ? 4 : 8;
    const std::size_t numel = shape.numel();
    r.need(numel * width, "tensor data");
    BasicTensor<T> t(shape);
    for (std::size_t i = 0; i < numel; ++i) {
      if (kind == 0) {
        const auto bits = r.get<std::uint32_t>("tensor data");
        float v;
        std::memcpy(&v, &bits, 4);
        t[i] = static_cast<T>(v);
      } else {
        const auto bits = r.get<std::uint64_t>("tensor data");
        double v;
        std::memcpy(&v, &bits, 8);
        t[i] = static_cast<T>(v);
      }
    }
    if (!params.tensors.emplace(std::move(name), std::move(t)).second) {
      throw DataError("duplicate tensor name in weight file");
    }
  }
  if (r.at != bytes.size()) {
    throw DataError("weight file has " + std::to_string(bytes.size() - r.at) + " trailing bytes");
  }
  return params;
}

template <typename T>
void save_weights(const fs::path& path, const ModelParams<T>& params) {
  write_file(path, encode_weights(params));
}

template <typename T>
ModelParams<T> load_weights(const fs::path& path) {
  try {
    return decode_weights<T>(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

template <typename T>
void check_weights(const ModelParams<T>& params, const ModelConfig& config) {
  const auto ref = build_model<double>(config, 0);
  for (const auto& [name, t] : ref.tensors) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) {
      throw DataError("weights lack tensor '" + name + "' required by " + config.name());
    }
    if (!(it->second.shape() == t.shape())) {
      throw DataError("tensor '" + name + "' has shape " + it->second.shape().str() + ", " +
                      config.name() + " needs " + t.shape().str());
    }
  }
  for (const auto& [name, t] : params.tensors) {
    if (!ref.contains(name)) throw DataError("weights hold tensor '" + name + "' unknown to " + config.name());
  }
}

template std::string encode_weights(const ModelParams<float>&);
template std::string encode_weights(const ModelParams<double>&);
template ModelParams<float> decode_weights(std::string_view);
template ModelParams<double> decode_weights(std::string_view);
template void save_weights(const fs::path&, const ModelParams<float>&);
template void save_weights(const fs::path&, const ModelParams<double>&);
template ModelParams<float> load_weights(const fs::path&);
template ModelParams<double> load_weights(const fs::path&);
template void check_weights(const ModelParams<float>&, const ModelConfig&);
template void check_weights(const ModelParams<double>&, const ModelConfig&);

// --- annotations ----------------------------------------------------------

DatasetIndex parse_annotations(std::string_view text) {
  const auto lines = split_lines(text);
  DatasetIndex index;
  std::size_t i = 0;
  auto all_numeric = [](const std::vector<std::string_view>& tok) {
    double v;
    return std::all_of(tok.begin(), tok.end(), [&](std::string_view t) { return to_double(t, v); });
  };
  while (i < lines.size()) {
    if (trim(lines[i]).empty()) {
      ++i;
      continue;
    }
    DatasetEntry e;
    e.path = std::string(trim(lines[i]));
    const std::size_t path_line = i++;
    if (i >= lines.size()) throw DataError(at_line(path_line) + "record '" + e.path + "' has no count line");
    const auto count_tok = split_ws(lines[i]);
    long count = -1;
    if (count_tok.size() != 1 || !to_int(count_tok[0], count) || count < 0) {
      throw DataError(at_line(i) + "malformed box count '" + std::string(trim(lines[i])) + "'");
    }
    ++i;
    if (count == 0 && i < lines.size()) {
      // Zero-face records may carry one placeholder row of zeros.
      const auto tok = split_ws(lines[i]);
      if (tok.size() >= 4 && all_numeric(tok)) ++i;
    }
    for (long k = 0; k < count; ++k, ++i) {
      if (i >= lines.size()) {
        throw DataError(at_line(i) + "record '" + e.path + "' ends after " + std::to_string(k) + " of " +
                        std::to_string(count) + " boxes");
      }
      const auto tok = split_ws(lines[i]);
      if (tok.size() < 4) {
        throw DataError(at_line(i) + "expected box " + std::to_string(k + 1) + " of " + std::to_string(count) +
                        " for '" + e.path + "' (x y w h), got '" + std::string(trim(lines[i])) + "'");
      }
      double v[4];
      for (int j = 0; j < 4; ++j) {
        if (!to_double(tok[static_cast<std::size_t>(j)], v[j])) {
          throw DataError(at_line(i) + "non-numeric box field '" + std::string(tok[static_cast<std::size_t>(j)]) +
                          "'");
        }
      }
      if (v[2] <= 0 || v[3] <= 0) {
        ++index.dropped;
        continue;
      }
      e.boxes.push_back({v[0], v[1], v[2], v[3]});
    }
    index.entries.push_back(std::move(e));
  }
  return index;
}

std::string serialize_annotations(const DatasetIndex& index) {
  std::string out;
  for (const auto& e : index.entries) {
    out += e.path + "\n" + std::to_string(e.boxes.size()) + "\n";
    for (const auto& b : e.boxes) {
      out += shortest(b.x) + " " + shortest(b.y) + " " + shortest(b.w) + " " + shortest(b.h) + "\n";
    }
  }
  return out;
}

DatasetIndex load_annotations(const fs::path& path) {
  try {
    return parse_annotations(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<Sample> load_dataset(const fs::path& annotation_file, DatasetIndex* index_out) {
  DatasetIndex index = load_annotations(annotation_file);
  const fs::path dir = annotation_file.parent_path();
  std::vector<Sample> out;
  for (auto& e : index.entries) {
    Sample s;
    s.image = load_image(dir / e.path);
    const double w = s.image.w(), h = s.image.h();
    std::vector<Box> kept;
    for (const auto& b : e.boxes) {
      const double x0 = std::clamp(b.x, 0.0, w), y0 = std::clamp(b.y, 0.0, h);
      const double x1 = std::clamp(b.x + b.w, 0.0, w), y1 = std::clamp(b.y + b.h, 0.0, h);
      if (x1 > x0 && y1 > y0) {
        kept.push_back({x0, y0, x1 - x0, y1 - y0});
      } else {
        ++index.dropped;
      }
    }
    e.boxes = kept;
    s.boxes = std::move(kept);
    out.push_back(std::move(s));
  }
  if (index_out) *index_out = std::move(index);
  return out;
}

// --- config text ----------------------------------------------------------

ModelConfig parse_config(std::string_view text) {
  const auto lines = split_lines(text);
  std::map<std::string, std::pair<std::string, std::size_t>> kv;
  static const char* known[] = {"variant", "width",      "depth", "activation",
                                "levels",  "expansion",  "seed",  "bn_per_pass"};
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view l = lines[i];
    if (auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
    l = trim(l);
    if (l.empty()) continue;
    const auto eq = l.find('=');
    if (eq == std::string_view::npos) throw DataError(at_line(i) + "expected 'key = value'");
    const std::string key(trim(l.substr(0, eq)));
    const std::string value(trim(l.substr(eq + 1)));
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw DataError(at_line(i) + "unknown config key '" + key + "'");
    }
    if (value.empty()) throw DataError(at_line(i) + "empty value for '" + key + "'");
    if (!kv.emplace(key, std::make_pair(value, i)).second) {
      throw DataError(at_line(i) + "duplicate config key '" + key + "'");
    }
  }

  auto integer = [&](const std::string& key, long lo) {
    const auto& [v, line] = kv.at(key);
    long x;
    if (!to_int(std::string_view(v), x) || x < lo) {
      throw DataError(at_line(line) + "'" + key + "' needs an integer >= " + std::to_string(lo) + ", got '" +
                      v + "'");
    }
    return static_cast<int>(x);
  };
  auto wrap = [&](const std::string& key, auto fn) {
    try {
      return fn(kv.at(key).first);
    } catch (const std::invalid_argument& e) {
      throw DataError(at_line(kv.at(key).second) + e.what());
    }
  };

  ModelConfig c;
  if (kv.count("variant")) c.variant = wrap("variant", [](const std::string& v) { return parse_variant(v); });
  if (kv.count("activation")) {
    c.activation = wrap("activation", [](const std::string& v) { return parse_activation(v); });
  }
  if (kv.count("width")) c.width = integer("width", 1);
  if (c.width == 32 || c.width == 48 || c.width == 64) {
    const auto p = ModelConfig::preset(c.variant, c.width, c.activation);
    c.depth = p.depth;
    c.expansion = p.expansion;
  }
  if (kv.count("depth")) {
    const int d = integer("depth", 1);
    if (d != c.depth) {
      c.depth = d;
      c.expansion.assign(static_cast<std::size_t>(d), 1);
    }
  }
  if (kv.count("expansion")) {
    const auto& [v, line] = kv.at("expansion");
    c.expansion.clear();
    std::string_view rest = v;
    while (true) {
      const auto comma = rest.find(',');
      const std::string_view item = trim(rest.substr(0, comma));
      int x;
      if (!to_int(item, x)) throw DataError(at_line(line) + "bad expansion factor '" + std::string(item) + "'");
      c.expansion.push_back(x);
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    if (!kv.count("depth")) c.depth = static_cast<int>(c.expansion.size());
  }
  if (kv.count("levels")) c.levels = integer("levels", 1);
  if (kv.count("seed")) {
    const auto& [v, line] = kv.at("seed");
    if (!to_int(std::string_view(v), c.seed)) throw DataError(at_line(line) + "bad seed '" + v + "'");
  }
  if (kv.count("bn_per_pass")) {
    const auto& [v, line] = kv.at("bn_per_pass");
    if (v == "true" || v == "1") {
      c.bn_per_pass = true;
    } else if (v == "false" || v == "0") {
      c.bn_per_pass = false;
    } else {
      throw DataError(at_line(line) + "bn_per_pass must be true or false");
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("invalid config: ") + e.what());
  }
  return c;
}

std::string format_config(const ModelConfig& c) {
  std::string exp;
  for (std::size_t i = 0; i < c.expansion.size(); ++i) exp += (i ? "," : "") + std::to_string(c.expansion[i]);
  std::string out;
  out += "variant = " + to_string(c.variant) + "\n";
  out += "width = " + std::to_string(c.width) + "\n";
  out += "depth = " + std::to_string(c.depth) + "\n";
  out += "activation = " + to_string(c.activation) + "\n";
  out += "levels = " + std::to_string(c.levels) + "\n";
  out += "expansion = " + exp + "\n";
  out += "seed = " + std::to_string(c.seed) + "\n";
  if (c.bn_per_pass) out += "bn_per_pass = true\n";
  return out;
}

ModelConfig load_config(const fs::path& path) {
  try {
    return parse_config(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// --- detections and curves ------------------------------------------------

std::string format_detections(const std::vector<ImageDetections>& images) {
  std::string out;
  char buf[160];
  for (const auto& im : images) {
    out += im.id + "\n" + std::to_string(im.dets.size()) + "\n";
    for (const auto& d : im.dets) {
      std::snprintf(buf, sizeof buf, "%.4f %.4f %.4f %.4f %.4f\n", d.box.x, d.box.y, d.box.w, d.box.h, d.score);
      out += buf;
    }
  }
  return out;
}

std::vector<ImageDetections> parse_detections(std::string_view text) {
  const auto lines = split_lines(text);
  std::vector<ImageDetections> out;
  std::size_t i = 0;
  while (i < lines.size()) {
    if (trim(lines[i]).empty()) {
      ++i;
      continue;
    }
    ImageDetections im;
    im.id = std::string(trim(lines[i++]));
    long count = -1;
    if (i >= lines.size() || !to_int(trim(lines[i]), count) || count < 0) {
      throw DataError(at_line(std::min(i, lines.size())) + "malformed detection count for '" + im.id + "'");
    }
    ++i;
    for (long k = 0; k < count; ++k, ++i) {
      if (i >= lines.size()) throw DataError(at_line(i) + "detections for '" + im.id + "' are truncated");
      const auto tok = split_ws(lines[i]);
      double v[5];
      if (tok.size() != 5) throw DataError(at_line(i) + "expected 'x y w h score'");
      for (int j = 0; j < 5; ++j)
        if (!to_double(tok[static_cast<std::size_t>(j)], v[j])) throw DataError(at_line(i) + "non-numeric field");
      im.dets.push_back({Box{v[0], v[1], v[2], v[3]}, v[4], 0});
    }
    out.push_back(std::move(im));
  }
  return out;
}

std::string format_pr(const std::vector<PrPoint>& points) {
  std::string out;
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%.3f %.6f %.6f\n", p.threshold, p.precision, p.recall);
    out += buf;
  }
  return out;
}

// --- synthetic data -------------------------------------------------------

Sample synth_sample(std::mt19937_64& rng, int res) {
  if (res < 32) throw std::invalid_argument("synth_sample: resolution must be at least 32");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u(rng); };
  auto uint_in = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

  // Background: tinted low-frequency waves plus pixel noise.
  std::vector<double> img(static_cast<std::size_t>(3) * res * res);
  auto px = [&](int c, int y, int x) -> double& {
    return img[(static_cast<std::size_t>(c) * res + y) * res + x];
  };
  double base[3], amp[3][3], fx[3], fy[3], ph[3][3];
  for (double& b : base) b = uni(0.15, 0.85);
  for (int k = 0; k < 3; ++k) {
    fx[k] = uni(-0.3, 0.3);
    fy[k] = uni(-0.3, 0.3);
    for (int c = 0; c < 3; ++c) {
      amp[k][c] = uni(0.0, 0.12);
      ph[k][c] = uni(0.0, 6.283185307179586);
    }
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        double v = base[c];
        for (int k = 0; k < 3; ++k) v += amp[k][c] * std::sin(fx[k] * x + fy[k] * y + ph[k][c]);
        px(c, y, x) = v + uni(-0.08, 0.08);
      }

  Sample s;
  const int faces = uint_in(1, 5);
  for (int f = 0; f < faces; ++f) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const int w = uint_in(8, res / 2);
      const int h = std::min(res, static_cast<int>(std::lround(w * uni(1.0, 1.25))));
      const Box b{static_cast<double>(uint_in(0, res - w)), static_cast<double>(uint_in(0, res - h)),
                  static_cast<double>(w), static_cast<double>(h)};
      const bool clash = std::any_of(s.boxes.begin(), s.boxes.end(), [&](const Box& o) {
        return b.x < o.x + o.w + 2 && o.x < b.x + b.w + 2 && b.y < o.y + o.h + 2 && o.y < b.y + b.h + 2;
      });
      if (!clash) {
        s.boxes.push_back(b);
        break;
      }
    }
  }

  for (const Box& b : s.boxes) {
    const double r = uni(0.75, 0.95);
    const double skin[3] = {r, r * uni(0.65, 0.8), r * uni(0.45, 0.65)};
    const double dark[3] = {skin[0] * 0.25, skin[1] * 0.2, skin[2] * 0.2};
    const double lip[3] = {0.55 * skin[0], 0.15 * skin[1], 0.2 * skin[2]};
    const double cx = b.x + b.w / 2, cy = b.y + b.h / 2, ax = b.w / 2, ay = b.h / 2;
    const double eye_r = std::max(1.0, 0.08 * b.w);
    const double ex[2] = {b.x + 0.32 * b.w, b.x + 0.68 * b.w}, ey = b.y + 0.4 * b.h;
    const double mx = cx, my = b.y + 0.55 * b.h, mr = 0.22 * b.w, mt = std::max(0.8, 0.045 * b.w);
    for (int y = static_cast<int>(b.y); y < static_cast<int>(b.y + b.h); ++y)
      for (int x = static_cast<int>(b.x); x < static_cast<int>(b.x + b.w); ++x) {
        const double qx = x + 0.5, qy = y + 0.5;
        const double e = (qx - cx) * (qx - cx) / (ax * ax) + (qy - cy) * (qy - cy) / (ay * ay);
        if (e > 1) continue;
        const double* col = skin;
        for (double exx : ex)
          if ((qx - exx) * (qx - exx) + (qy - ey) * (qy - ey) <= eye_r * eye_r) col = dark;
        const double dm = std::hypot(qx - mx, qy - my);
        if (qy > my + 0.35 * mr && std::abs(dm - mr) <= mt) col = lip;
        for (int c = 0; c < 3; ++c) px(c, y, x) = col[c];
      }
  }

  s.image = Tensor(1, 3, res, res);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const double v = std::clamp(px(c, y, x), 0.0, 1.0);
        s.image.at(0, c, y, x) = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
      }
  return s;
}

std::vector<Sample> synth_dataset(int count, int resolution, std::uint64_t seed) {
  if (count < 0) throw std::invalid_argument("synth_dataset: negative count");
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(synth_sample(rng, resolution));
  return out;
}

DatasetIndex synth_generate(int count, int resolution, std::uint64_t seed, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create '" + out_dir.string() + "': " + ec.message());
  std::mt19937_64 rng(seed);
  DatasetIndex index;
  for (int i = 0; i < count; ++i) {
    Sample s = synth_sample(rng, resolution);
    char name[32];
    std::snprintf(name, sizeof name, "img_%05d.ppm", i);
    save_image(out_dir / name, s.image);
    index.entries.push_back({name, std::move(s.boxes)});
  }
  write_file(out_dir / "annotations.txt", serialize_annotations(index));
  return index;
}

}  // namespace extd
