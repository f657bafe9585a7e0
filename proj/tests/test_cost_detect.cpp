#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "extd/cost.hpp"
#include "extd/detect.hpp"

using namespace extd;

namespace {

// Closed-form conv madds of an EXTD model, written from the layer formulas
// rather than the architecture walker.
std::int64_t closed_form_madds(const ModelConfig& m, std::int64_t r) {
  const std::int64_t c = m.width;
  std::int64_t total = (r / 2) * (r / 2) * c * 3 * 9;  // E
  for (int pass = 0; pass < m.levels; ++pass) {
    const std::int64_t in = r >> (pass + 1), out = in / 2;
    for (int b = 0; b < m.depth; ++b) {
      const std::int64_t hid = c * m.expansion[static_cast<std::size_t>(b)];
      total += b == 0 ? in * in * (9 * c + c * c) : in * in * (2 * c * hid + 9 * hid);
    }
    total += out * out * 9 * c * c;  // F.down
  }
  for (int l = 1; l <= m.levels; ++l) {
    const std::int64_t s = r >> (l + 1);
    total += s * s * 9 * c * ((l == 1 ? 4 : 2) + 4);
    if (m.variant == Variant::Fpn && l < m.levels) total += s * s * (9 * c + c * c);
  }
  return total;
}

struct Target {
  Variant v;
  int width;
  double params, madds;
};

const Target kTargets[] = {
    {Variant::Fpn, 32, 0.063e6, 4.52e9}, {Variant::Fpn, 48, 0.10e6, 6.67e9},
    {Variant::Fpn, 64, 0.16e6, 11.2e9},  {Variant::Ssd, 32, 0.056e6, 4.35e9},
    {Variant::Ssd, 48, 0.086e6, 6.63e9}, {Variant::Ssd, 64, 0.14e6, 10.6e9},
};

}  // namespace

TEST_CASE("single stride-2 conv at 640") {
  PlainNetwork net;
  net.name = "one";
  BlockDesc b;
  b.name = "c";
  b.layers.push_back({LayerKind::Conv, "c.conv", ConvSpec::dense3x3(3, 64, 2), 0, ActKind::Relu});
  net.stages.push_back({"x", b});
  const auto r = count_madds(net, 640, 640);
  CHECK(r.madds == 176947200);
  CHECK(r.params == 64 * 27);
}

TEST_CASE("description params equal built params") {
  for (const auto& t : kTargets) {
    for (ActKind a : {ActKind::PRelu, ActKind::LeakyRelu, ActKind::Relu}) {
      const auto cfg = ModelConfig::preset(t.v, t.width, a);
      const auto built = build_model<float>(cfg, 1);
      CHECK(count_params(cfg) == count_params(built));
      CHECK(count_madds(cfg, 640, 640).params == count_params(built));
    }
  }
}

TEST_CASE("preset budgets") {
  for (const auto& t : kTargets) {
    const auto cfg = ModelConfig::preset(t.v, t.width);
    const auto r = count_madds(cfg, 640, 640);
    INFO(cfg.name() << " params " << r.params << " madds " << r.madds);
    CHECK(std::abs(r.params / t.params - 1) <= 0.10);
    CHECK(std::abs(r.madds / t.madds - 1) <= 0.15);
    CHECK(r.madds == closed_form_madds(cfg, 640));
  }
}

TEST_CASE("mobilefacenet comparison model") {
  const auto net = describe_s3fd_mobilefacenet();
  REQUIRE(net.stages.size() == 18);
  bool saw512 = false;
  for (const auto& l : net.stages[14].block.layers)
    if (l.name == "block14.expand") saw512 = l.conv.out_channels == 512;
  CHECK(saw512);
  const auto r = count_madds(net, 640, 640);
  INFO("params " << r.params << " madds " << r.madds);
  CHECK(std::abs(r.params / 1.2e6 - 1) <= 0.10);
  CHECK(std::abs(r.madds / 12.7e9 - 1) <= 0.15);
  CHECK(r.rows.back().name == "head6.reg");
}

TEST_CASE("report arithmetic") {
  const auto cfg = ModelConfig::preset(Variant::Fpn, 32);
  for (bool ew : {false, true}) {
    const auto r = count_madds(cfg, 640, 640, {ew});
    std::int64_t p = 0, m = 0;
    for (const auto& row : r.rows) {
      CHECK(row.total_madds == std::accumulate(row.madds_per_pass.begin(), row.madds_per_pass.end(),
                                               std::int64_t{0}));
      CHECK(row.passes() == (row.group == "F" ? cfg.levels : 1));
      p += row.params;
      m += row.total_madds;
    }
    CHECK(p == r.params);
    CHECK(m == r.madds);
    std::int64_t gp = 0, gm = 0;
    for (const auto& g : r.groups()) {
      gp += g.params;
      gm += g.madds;
    }
    CHECK(gp == r.params);
    CHECK(gm == r.madds);

    // The machine-readable lines carry the same numbers.
    std::istringstream in(r.lines());
    std::string name, list;
    std::int64_t lp, total, lines_m = 0;
    int passes;
    std::size_t count = 0;
    while (in >> name >> lp >> list >> passes >> total) {
      CHECK(name == r.rows[count].name);
      CHECK(passes == r.rows[count].passes());
      CHECK(std::count(list.begin(), list.end(), ',') == passes - 1);
      lines_m += total;
      ++count;
    }
    CHECK(count == r.rows.size());
    CHECK(lines_m == r.madds);
  }
  const auto with = count_madds(cfg, 640, 640, {true});
  const auto without = count_madds(cfg, 640, 640, {false});
  CHECK(with.madds > without.madds);
  CHECK(with.params == without.params);
  CHECK(without.table().find("total") != std::string::npos);
}

TEST_CASE("madds scale quadratically, params do not") {
  for (Variant v : {Variant::Fpn, Variant::Ssd}) {
    const auto cfg = ModelConfig::preset(v, 48);
    const auto a = count_madds(cfg, 640, 640);
    const auto b = count_madds(cfg, 1280, 1280);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
      for (std::size_t p = 0; p < a.rows[i].madds_per_pass.size(); ++p)
        CHECK(b.rows[i].madds_per_pass[p] == 4 * a.rows[i].madds_per_pass[p]);
    }
    CHECK(a.params == b.params);
    auto c3 = cfg;
    c3.levels = 3;
    // Only heads and upsample blocks depend on N.
    const auto r3 = count_madds(c3, 640, 640);
    std::int64_t fixed3 = 0, fixed6 = 0;
    for (const auto& row : r3.rows)
      if (row.group == "E" || row.group == "F") fixed3 += row.params;
    for (const auto& row : a.rows)
      if (row.group == "E" || row.group == "F") fixed6 += row.params;
    CHECK(fixed3 == fixed6);
  }
}

TEST_CASE("indivisible input rejected") {
  CHECK_THROWS_AS(count_madds(ModelConfig::preset(Variant::Fpn, 32), 600, 640), std::invalid_argument);
}

TEST_CASE("expansion calibration") {
  auto skel = ModelConfig::preset(Variant::Fpn, 32);
  const auto e32 = calibrate_expansions(63000, skel);
  CHECK(e32 == skel.expansion);
  skel.expansion = e32;
  CHECK(std::abs(count_params(skel) / 63000.0 - 1) <= 0.10);

  auto skel48 = ModelConfig::preset(Variant::Fpn, 48);
  const auto e48 = calibrate_expansions(100000, skel48);
  CHECK(e48 == skel48.expansion);
  skel48.expansion = e48;
  CHECK(std::abs(count_params(skel48) / 100000.0 - 1) <= 0.10);

  CHECK_THROWS_AS(calibrate_expansions(10, skel), std::invalid_argument);

  // Lexicographically smallest: a target reachable by many factor lists
  // resolves to the one that expands the last block first.
  auto skel_small = ModelConfig::preset(Variant::Fpn, 32);
  skel_small.expansion.assign(8, 1);
  const std::int64_t base = count_params(skel_small);
  skel_small.expansion.back() = 2;
  const std::int64_t step = count_params(skel_small) - base;
  const auto e = calibrate_expansions(base + 2 * step, skel_small);
  CHECK(e == std::vector<int>{1, 1, 1, 1, 1, 1, 1, 3});
}

// --------------------------------------------------------------------------
// detection and evaluation
// --------------------------------------------------------------------------

namespace {

Detection det(double x, double y, double w, double h, double s) { return {Box{x, y, w, h}, s, 1}; }

// Keep-set of greedy NMS via its fixed-point definition: a box survives iff no
// surviving box of higher priority overlaps it by more than t.
std::vector<std::size_t> nms_oracle(const std::vector<Detection>& d, double t) {
  const std::size_t n = d.size();
  auto before = [&](std::size_t a, std::size_t b) {
    return d[a].score > d[b].score || (d[a].score == d[b].score && a < b);
  };
  std::vector<std::size_t> rank(n);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::sort(rank.begin(), rank.end(), before);
  std::vector<char> alive(n, 0);
  for (std::size_t i : rank) {
    alive[i] = 1;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && alive[j] && before(j, i) && iou(d[i].box, d[j].box) > t) alive[i] = 0;
  }
  std::vector<std::size_t> out;
  for (std::size_t i : rank)
    if (alive[i]) out.push_back(i);
  return out;
}

}  // namespace

TEST_CASE("nms hand example and trivia") {
  // B overlaps A with IoU exactly 0.6: width 10 boxes offset by 2.5.
  const Detection a = det(0, 0, 10, 10, 0.9), b = det(2.5, 0, 10, 10, 0.8), c = det(50, 50, 10, 10, 0.7);
  REQUIRE(iou(a.box, b.box) == doctest::Approx(0.6));
  const auto kept = nms({b, c, a}, 0.3);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].score == 0.9);
  CHECK(kept[1].score == 0.7);

  CHECK(nms({a}, 0.3).size() == 1);
  CHECK(nms({a, a, a}, 0.3).size() == 1);
  CHECK(nms({}, 0.3).empty());
}

TEST_CASE("nms matches the brute-force oracle") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(u(rng) * 30);
    std::vector<Detection> d;
    for (int i = 0; i < n; ++i) {
      // Coarse scores to exercise ties.
      d.push_back(det(u(rng) * 40, u(rng) * 40, 4 + u(rng) * 20, 4 + u(rng) * 20,
                      std::round(u(rng) * 8) / 8));
    }
    const double t = 0.1 + 0.6 * u(rng);
    const auto got = nms(d, t);
    const auto want = nms_oracle(d, t);
    REQUIRE(got.size() == want.size());
    for (std::size_t k = 0; k < got.size(); ++k) {
      CHECK(got[k].box == d[want[k]].box);
      CHECK(got[k].score == d[want[k]].score);
    }
    for (std::size_t i = 0; i < got.size(); ++i)
      for (std::size_t j = i + 1; j < got.size(); ++j) CHECK(iou(got[i].box, got[j].box) <= t);

    // With distinct scores the result does not depend on input order.
    for (std::size_t i = 0; i < d.size(); ++i) d[i].score = u(rng);
    auto shuffled = d;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto k1 = nms(d, t), k2 = nms(shuffled, t);
    REQUIRE(k1.size() == k2.size());
    for (std::size_t i = 0; i < k1.size(); ++i) CHECK(k1[i].box == k2[i].box);
  }
}

TEST_CASE("average precision examples") {
  const std::vector<std::vector<Box>> gts = {{Box{0, 0, 10, 10}, Box{20, 20, 10, 10}}};
  {
    std::vector<std::vector<Detection>> d = {{det(0, 0, 10, 10, 1), det(20, 20, 10, 10, 1)}};
    const auto r = average_precision(d, gts);
    CHECK(r.ap == 1.0);
    CHECK(r.tp == 2);
    CHECK(r.fp == 0);
    CHECK(r.fn == 0);
  }
  {
    const auto r = average_precision({{}}, gts);
    CHECK(r.ap == 0.0);
    CHECK(r.fn == 2);
  }
  {
    std::vector<std::vector<Detection>> d = {
        {det(0, 0, 10, 10, 0.9), det(60, 60, 10, 10, 0.8), det(20, 20, 10, 10, 0.7)}};
    const auto r = average_precision(d, gts);
    CHECK(r.ap == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    CHECK(r.tp == 2);
    CHECK(r.fp == 1);
  }
  {
    // A duplicate of a matched box is a false positive.
    std::vector<std::vector<Detection>> d = {{det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)}};
    const auto r = average_precision(d, gts);
    CHECK(r.tp == 1);
    CHECK(r.fp == 1);
    CHECK(r.ap == doctest::Approx(0.5));
  }
  CHECK_THROWS_AS(average_precision({}, gts), std::invalid_argument);
}

TEST_CASE("average precision properties") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<Box>> gts(4);
    std::vector<std::vector<Detection>> dets(4);
    for (int i = 0; i < 4; ++i) {
      const int ng = static_cast<int>(u(rng) * 4);
      for (int k = 0; k < ng; ++k) gts[i].push_back({u(rng) * 50, u(rng) * 50, 8 + u(rng) * 20, 8 + u(rng) * 20});
      const int nd = static_cast<int>(u(rng) * 6);
      for (int k = 0; k < nd; ++k) {
        if (!gts[i].empty() && u(rng) < 0.6) {
          Box g = gts[i][static_cast<std::size_t>(u(rng) * gts[i].size())];
          g.x += (u(rng) - 0.5) * 4;
          dets[i].push_back({g, u(rng), 1});
        } else {
          dets[i].push_back(det(u(rng) * 50, u(rng) * 50, 10, 10, u(rng)));
        }
      }
    }
    const auto r = average_precision(dets, gts);
    CHECK(r.ap >= 0.0);
    CHECK(r.ap <= 1.0);
    REQUIRE(r.pr.size() == 1000);
    for (std::size_t k = 0; k < r.pr.size(); ++k) {
      CHECK(r.pr[k].precision >= 0);
      CHECK(r.pr[k].precision <= 1);
      CHECK(r.pr[k].recall >= 0);
      CHECK(r.pr[k].recall <= 1);
      if (k > 0) {
        CHECK(r.pr[k].threshold < r.pr[k - 1].threshold);
        CHECK(r.pr[k].recall >= r.pr[k - 1].recall);
      }
    }
    CHECK(r.tp + r.fn == r.num_gt);

    // Strictly monotone score transforms leave AP unchanged.
    auto warped = dets;
    for (auto& list : warped)
      for (auto& d : list) d.score = std::pow(d.score, 3.0) * 0.5 + 0.1;
    CHECK(average_precision(warped, gts).ap == r.ap);
  }
}

TEST_CASE("zero-logit model scores one half everywhere") {
  ModelConfig cfg = ModelConfig::preset(Variant::Fpn, 32);
  cfg.levels = 4;
  auto params = build_model<float>(cfg, 5);
  for (auto& [name, t] : params.tensors)
    if (name.find(".cls.") != std::string::npos) t.fill(0.0f);
  Tensor img(1, 3, 64, 64);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : img.data()) v = u(rng);
  const auto heads = infer(params, cfg, img);
  const auto grid = generate_anchors(64, 64, cfg.levels);
  const auto raw = decode_heads(heads, grid, 0, 64, 64, 0.0);
  for (const auto& d : raw) CHECK(d.score == 0.5);
  CHECK(decode_heads(heads, grid, 0, 64, 64, 0.5).empty());
}

TEST_CASE("detect on padded inputs") {
  ModelConfig cfg = ModelConfig::preset(Variant::Fpn, 32);
  auto params = build_model<float>(cfg, 9);
  // Untrained regression outputs are huge; with them zeroed every box is an
  // anchor, many of which cross the 600-pixel border.
  for (auto& [name, t] : params.tensors)
    if (name.find(".reg.") != std::string::npos) t.fill(0.0f);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0, 1);

  Tensor img(1, 3, 600, 600);
  for (auto& v : img.data()) v = u(rng);
  const auto padded = pad_to_multiple(img, cfg.size_multiple());
  CHECK(padded.h() == 640);
  CHECK(padded.w() == 640);
  CHECK(padded.at(0, 2, 620, 10) == 0.0f);
  CHECK(padded.at(0, 1, 599, 599) == img.at(0, 1, 599, 599));

  DetectOptions o;
  o.conf = 0.0;
  const auto dets = detect(params, cfg, img, o);
  CHECK(!dets.empty());
  CHECK(dets.size() <= 750);
  for (const auto& d : dets) {
    CHECK(d.box.x >= 0);
    CHECK(d.box.y >= 0);
    CHECK(d.box.x + d.box.w <= 600);
    CHECK(d.box.y + d.box.h <= 600);
    CHECK(d.box.w > 0);
    CHECK(d.box.h > 0);
    CHECK(d.score >= 0);
    CHECK(d.score <= 1);
    CHECK(d.level >= 1);
    CHECK(d.level <= cfg.levels);
  }
  const auto again = detect(params, cfg, img, o);
  REQUIRE(again.size() == dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    CHECK(again[i].box == dets[i].box);
    CHECK(again[i].score == dets[i].score);
  }

  Tensor small(1, 3, 20, 30);
  for (auto& v : small.data()) v = u(rng);
  CHECK_NOTHROW(detect(params, cfg, small));

  // Lowering the confidence threshold never removes raw candidates.
  const auto heads = infer(params, cfg, padded);
  const auto grid = generate_anchors(640, 640, cfg.levels);
  std::size_t prev = 0;
  for (double conf : {0.9, 0.6, 0.5, 0.3, 0.05, 0.0}) {
    const auto raw = decode_heads(heads, grid, 0, 600, 600, conf);
    CHECK(raw.size() >= prev);
    prev = raw.size();
  }
}

TEST_CASE("bench reports every size in order of cost") {
  ModelConfig cfg = ModelConfig::preset(Variant::Fpn, 32);
  cfg.levels = 4;
  const auto params = build_model<float>(cfg, 1);
  const auto r = bench(params, cfg, {64, 128, 256}, 3);
  REQUIRE(r.size() == 3);
  CHECK(r[0].size == 64);
  CHECK(r[2].size == 256);
  CHECK(r[0].mean_ms < r[1].mean_ms);
  CHECK(r[1].mean_ms < r[2].mean_ms);
  CHECK_THROWS_AS(bench(params, cfg, {100}, 1), std::invalid_argument);
}
