#include <doctest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <random>

#include "extd/io.hpp"
#include "extd/train.hpp"

using namespace extd;
namespace fs = std::filesystem;

namespace {

const fs::path kGolden = EXTD_GOLDEN_DIR;

fs::path scratch_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("extd_test_io_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

template <typename T>
bool bitwise_equal(const ModelParams<T>& a, const ModelParams<T>& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    if (!b.contains(name)) return false;
    const auto& u = b.at(name);
    if (t.shape() != u.shape()) return false;
    if (std::memcmp(t.raw(), u.raw(), t.size() * sizeof(T)) != 0) return false;
  }
  return true;
}

std::string throws_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

// --- NetPBM ---------------------------------------------------------------

TEST_CASE("P6 with all-255 pixels decodes to ones") {
  std::string ppm = "P6\n2 2\n255\n" + std::string(12, '\xff');
  const Tensor t = decode_netpbm(ppm);
  CHECK(t.shape() == Shape{1, 3, 2, 2});
  for (float v : t.data()) CHECK(v == 1.0f);
}

TEST_CASE("P5 replicates gray into three identical channels") {
  const std::string pgm = "P5 # gray\n3 1\n# comment line\n255\n" + std::string("\x00\x80\xff", 3);
  const Tensor t = decode_netpbm(pgm);
  CHECK(t.shape() == Shape{1, 3, 1, 3});
  for (int x = 0; x < 3; ++x) {
    CHECK(t.at(0, 0, 0, x) == t.at(0, 1, 0, x));
    CHECK(t.at(0, 0, 0, x) == t.at(0, 2, 0, x));
  }
  CHECK(t.at(0, 0, 0, 1) == 128.0f / 255.0f);
}

TEST_CASE("NetPBM errors: magic, truncation, maxval") {
  CHECK_THROWS_AS(decode_netpbm("P3\n1 1\n255\n0 0 0\n"), DataError);
  CHECK_THROWS_AS(decode_netpbm("P6\n2 2\n255\n" + std::string(11, 'a')), DataError);
  CHECK_THROWS_AS(decode_netpbm("P6\n1 1\n65535\n" + std::string(6, 'a')), DataError);
  CHECK_THROWS_AS(decode_netpbm("P6\n1 1\n15\n" + std::string(3, 'a')), DataError);
  CHECK_THROWS_AS(decode_netpbm("P6\n1\n"), DataError);
  CHECK_THROWS_AS(decode_netpbm(""), DataError);
}

TEST_CASE("PPM encode then decode is exact on 8-bit values") {
  std::mt19937 rng(5);
  Tensor img(1, 3, 7, 5);
  for (float& v : img.data()) v = static_cast<float>(rng() % 256) / 255.0f;
  const Tensor back = decode_netpbm(encode_ppm(img));
  CHECK(back.shape() == img.shape());
  CHECK(std::memcmp(back.raw(), img.raw(), img.size() * sizeof(float)) == 0);
}

// --- weight file ----------------------------------------------------------

TEST_CASE("weight round trip is bit-exact for both element kinds") {
  const ModelConfig cfg = tiny_config();
  const auto pf = build_model<float>(cfg, 3);
  CHECK(bitwise_equal(decode_weights<float>(encode_weights(pf)), pf));
  auto pd = build_model<double>(cfg, 3);
  // Values float cannot represent, to catch any narrowing on the way.
  pd.tensors.begin()->second.data()[0] = 1.0 / 3.0;
  CHECK(bitwise_equal(decode_weights<double>(encode_weights(pd)), pd));

  const fs::path dir = scratch_dir("weights");
  save_weights(dir / "w.bin", pd);
  CHECK(bitwise_equal(load_weights<double>(dir / "w.bin"), pd));
  CHECK_NOTHROW(check_weights(load_weights<double>(dir / "w.bin"), cfg));
}

TEST_CASE("weight file matches the hand-assembled golden bytes") {
  ModelParams<float> p;
  Tensor bias(1, 2, 1, 1), weight(2, 1, 1, 1);
  bias.data()[0] = 0.5f;
  bias.data()[1] = -1.0f;
  weight.data()[0] = 1.0f;
  weight.data()[1] = 2.25f;
  p.tensors.emplace("conv.bias", bias);
  p.tensors.emplace("conv.weight", weight);
  const std::string golden = read_file(kGolden / "tiny.weights");
  CHECK(encode_weights(p) == golden);
  CHECK(bitwise_equal(decode_weights<float>(golden), p));
  // Stored single precision widens exactly.
  const auto d = decode_weights<double>(golden);
  CHECK(d.at("conv.weight").data()[1] == 2.25);
}

TEST_CASE("weight file errors") {
  const std::string good = read_file(kGolden / "tiny.weights");
  CHECK_THROWS_AS(decode_weights<float>("EXTX" + good.substr(4)), DataError);
  std::string bad_version = good;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_weights<float>(bad_version), DataError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, good.size() - 1}) {
    CHECK_THROWS_AS(decode_weights<float>(good.substr(0, cut)), DataError);
  }
  CHECK_THROWS_AS(decode_weights<float>(good + "x"), DataError);

  // Header plus the first record twice.
  const std::size_t second = good.find("conv.weight") - 2;
  const std::string first = good.substr(12, second - 12);
  CHECK_THROWS_AS(decode_weights<float>(good.substr(0, 12) + first + first), DataError);

  const auto wrong = build_model<float>(tiny_config(Variant::Ssd), 1);
  CHECK_THROWS_AS(check_weights(wrong, tiny_config(Variant::Fpn)), DataError);
}

// --- annotations ----------------------------------------------------------

TEST_CASE("annotation record with attribute columns") {
  const auto idx = parse_annotations("a.ppm\n1\n10 20 30 40 0 0 0 0 0 0\n");
  REQUIRE(idx.entries.size() == 1);
  CHECK(idx.entries[0].path == "a.ppm");
  REQUIRE(idx.entries[0].boxes.size() == 1);
  const Box b = idx.entries[0].boxes[0];
  CHECK(b.x == 10);
  CHECK(b.y == 20);
  CHECK(b.w == 30);
  CHECK(b.h == 40);
}

TEST_CASE("zero-count records, with or without a placeholder row") {
  const auto idx = parse_annotations("a.ppm\n0\nb.ppm\n0\n0 0 0 0 0 0 0 0 0 0\nc.ppm\n1\n1 2 3 4\n");
  REQUIRE(idx.entries.size() == 3);
  CHECK(idx.entries[0].boxes.empty());
  CHECK(idx.entries[1].boxes.empty());
  CHECK(idx.entries[2].boxes.size() == 1);
}

TEST_CASE("degenerate boxes are dropped and counted") {
  const auto idx = parse_annotations("a.ppm\n3\n1 1 0 5\n1 1 5 -2\n1 1 5 5\n");
  CHECK(idx.entries[0].boxes.size() == 1);
  CHECK(idx.dropped == 2);
}

TEST_CASE("annotation errors name the line") {
  CHECK(throws_message([] { parse_annotations("a.ppm\n2\n1 2 3 4\n"); }).starts_with("line 4: "));
  CHECK(throws_message([] { parse_annotations("a.ppm\ntwo\n"); }).starts_with("line 2: "));
  CHECK(throws_message([] { parse_annotations("a.ppm\n1\n1 2 x 4\n"); }).starts_with("line 3: "));
  CHECK(throws_message([] { parse_annotations("a.ppm\n1\n1 2 3\n"); }).starts_with("line 3: "));
  CHECK(throws_message([] { parse_annotations("a.ppm\n"); }).starts_with("line 1: "));
}

TEST_CASE("annotation parse, serialize, parse is a fixed point") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.1, 500.0);
  DatasetIndex idx;
  for (int i = 0; i < 40; ++i) {
    DatasetEntry e{"dir/img_" + std::to_string(i) + ".ppm", {}};
    for (int k = 0, n = static_cast<int>(rng() % 4); k < n; ++k) e.boxes.push_back({u(rng), u(rng), u(rng), u(rng)});
    idx.entries.push_back(e);
  }
  const std::string text = serialize_annotations(idx);
  const auto again = parse_annotations(text);
  REQUIRE(again.entries.size() == idx.entries.size());
  for (std::size_t i = 0; i < idx.entries.size(); ++i) {
    REQUIRE(again.entries[i].boxes.size() == idx.entries[i].boxes.size());
    for (std::size_t k = 0; k < idx.entries[i].boxes.size(); ++k) {
      CHECK(again.entries[i].boxes[k].x == idx.entries[i].boxes[k].x);
      CHECK(again.entries[i].boxes[k].h == idx.entries[i].boxes[k].h);
    }
  }
  CHECK(serialize_annotations(again) == text);
}

TEST_CASE("load_dataset resolves paths and clips boxes to the image") {
  const fs::path dir = scratch_dir("dataset");
  Tensor img(1, 3, 8, 10);
  save_image(dir / "a.ppm", img);
  write_file(dir / "gt.txt", "a.ppm\n2\n-2 1 6 4\n20 20 5 5\n");
  DatasetIndex idx;
  const auto samples = load_dataset(dir / "gt.txt", &idx);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].image.shape() == Shape{1, 3, 8, 10});
  REQUIRE(samples[0].boxes.size() == 1);
  CHECK(samples[0].boxes[0].x == 0);
  CHECK(samples[0].boxes[0].w == 4);
  CHECK_THROWS_AS(load_dataset(dir / "missing.txt"), DataError);
  write_file(dir / "bad.txt", "nope.ppm\n0\n");
  CHECK_THROWS_AS(load_dataset(dir / "bad.txt"), DataError);
}

// --- config text ----------------------------------------------------------

TEST_CASE("config parsing fills presets and rejects bad keys") {
  const ModelConfig c = parse_config("# fpn-48\nvariant = fpn\nwidth = 48\nactivation = relu  # trailing\n");
  const ModelConfig p = ModelConfig::preset(Variant::Fpn, 48, ActKind::Relu);
  CHECK(c.depth == p.depth);
  CHECK(c.expansion == p.expansion);
  CHECK(c.activation == ActKind::Relu);

  const ModelConfig d = parse_config("width = 16\ndepth = 3\nlevels = 4\n");
  CHECK(d.expansion == std::vector<int>{1, 1, 1});
  CHECK(parse_config("expansion = 1,2,3\n").depth == 3);

  CHECK_THROWS_AS(parse_config("colour = red\n"), DataError);
  CHECK_THROWS_AS(parse_config("width = 8\nwidth = 16\n"), DataError);
  CHECK_THROWS_AS(parse_config("width 8\n"), DataError);
  CHECK_THROWS_AS(parse_config("levels = 0\n"), DataError);
  CHECK_THROWS_AS(parse_config("activation = tanh\n"), DataError);
  CHECK_THROWS_AS(parse_config("depth = 2\nexpansion = 1,1,1\n"), DataError);
}

TEST_CASE("config format then parse round-trips") {
  for (auto v : {Variant::Fpn, Variant::Ssd})
    for (int w : {32, 48, 64}) {
      ModelConfig c = ModelConfig::preset(v, w, ActKind::LeakyRelu);
      c.seed = 99;
      c.bn_per_pass = w == 48;
      const ModelConfig back = parse_config(format_config(c));
      CHECK(format_config(back) == format_config(c));
      CHECK(back.bn_per_pass == c.bn_per_pass);
    }
}

// --- golden text formats --------------------------------------------------

TEST_CASE("golden: annotation text") {
  DatasetIndex idx;
  idx.entries.push_back({"img_a.ppm", {{10, 20, 30, 40}, {0.5, 1.25, 8, 9.75}}});
  idx.entries.push_back({"img_b.ppm", {}});
  CHECK(serialize_annotations(idx) == read_file(kGolden / "annotations.txt"));
}

TEST_CASE("golden: detection file") {
  std::vector<ImageDetections> im(2);
  im[0].id = "img_a.ppm";
  im[0].dets = {{{10, 20, 30, 40}, 0.95, 1}, {{1.5, 2.25, 8.125, 9}, 0.0625, 2}};
  im[1].id = "img_b.ppm";
  const std::string golden = read_file(kGolden / "detections.txt");
  CHECK(format_detections(im) == golden);
  CHECK(format_detections(parse_detections(golden)) == golden);
  CHECK_THROWS_AS(parse_detections("a\n2\n1 2 3 4 0.5\n"), DataError);
  CHECK_THROWS_AS(parse_detections("a\n1\n1 2 3 4\n"), DataError);
}

TEST_CASE("golden: PR curve, loss trace and config text") {
  CHECK(format_pr({{0.999, 1.0, 0.0}, {0.5, 2.0 / 3.0, 0.5}, {0.0, 0.25, 1.0}}) == read_file(kGolden / "pr.txt"));
  const std::string trace =
      format_trace_row({1, 7.25, 5, 2.25, 1e-3}) + "\n" + format_trace_row({2, 3.14159265, 2.718281828, 0.4233108, 1e-2}) + "\n";
  CHECK(trace == read_file(kGolden / "trace.txt"));
  ModelConfig c = ModelConfig::preset(Variant::Fpn, 32);
  c.seed = 7;
  CHECK(format_config(c) == read_file(kGolden / "config.txt"));
  CHECK(format_config(load_config(kGolden / "config.txt")) == read_file(kGolden / "config.txt"));
}

// --- synthetic data -------------------------------------------------------

TEST_CASE("synth output is byte-identical for a fixed seed") {
  const fs::path a = scratch_dir("synth_a"), b = scratch_dir("synth_b");
  const auto ia = synth_generate(6, 64, 21, a);
  synth_generate(6, 64, 21, b);
  for (const auto& entry : fs::directory_iterator(a)) {
    CHECK(read_file(entry.path()) == read_file(b / entry.path().filename()));
  }
  CHECK(ia.entries.size() == 6);
  // What was written is what the in-memory generator returns.
  const auto mem = synth_dataset(6, 64, 21);
  DatasetIndex idx;
  const auto disk = load_dataset(a / "annotations.txt", &idx);
  REQUIRE(disk.size() == mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) {
    CHECK(std::memcmp(disk[i].image.raw(), mem[i].image.raw(), mem[i].image.size() * sizeof(float)) == 0);
    CHECK(disk[i].boxes.size() == mem[i].boxes.size());
  }
  CHECK_NE(read_file(a / "img_00000.ppm"), encode_ppm(synth_dataset(1, 64, 22)[0].image));
}

TEST_CASE("synth boxes are in bounds, large enough and disjoint") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 300; ++i) {
    const int res = i % 2 ? 128 : 64;
    const Sample s = synth_sample(rng, res);
    REQUIRE(!s.boxes.empty());
    CHECK(s.boxes.size() <= 5);
    for (std::size_t k = 0; k < s.boxes.size(); ++k) {
      const Box& b = s.boxes[k];
      CHECK(b.w >= 8);
      CHECK(b.h >= 8);
      CHECK(b.w <= res / 2);
      CHECK(b.x >= 0);
      CHECK(b.y >= 0);
      CHECK(b.x + b.w <= res);
      CHECK(b.y + b.h <= res);
      for (std::size_t j = 0; j < k; ++j) CHECK(iou(b, s.boxes[j]) == 0.0);
    }
  }
}

TEST_CASE("synth face scales cover at least three anchor sizes") {
  // Bucket each face by the nearest anchor size on a log scale (16, 32, 64
  // at 128 px).
  std::mt19937_64 rng(8);
  std::map<int, int> hist;
  int faces = 0;
  for (int i = 0; i < 1000; ++i) {
    for (const Box& b : synth_sample(rng, 128).boxes) {
      const double scale = std::sqrt(b.w * b.h);
      const int level = static_cast<int>(std::lround(std::log2(scale / 16.0)));
      ++hist[std::clamp(level, 0, 5)];
      ++faces;
    }
  }
  int populated = 0;
  for (const auto& [level, n] : hist) populated += n >= faces / 20;
  CHECK(populated >= 3);
}

TEST_CASE("synth rejects tiny resolutions and unwritable directories") {
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(synth_sample(rng, 16), std::invalid_argument);
  const fs::path dir = scratch_dir("unwritable");
  write_file(dir / "file", "x");
  CHECK_THROWS_AS(synth_generate(1, 64, 0, dir / "file" / "sub"), DataError);
}
