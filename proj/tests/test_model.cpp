#include <doctest.h>

#include <random>

#include "extd/model.hpp"
#include "oracles.hpp"

using namespace extd;
using extd::testing::random_tensor;

namespace {

template <typename T>
long trainable_count(const ModelParams<T>& p) {
  long n = 0;
  for (const auto& [k, v] : p.tensors)
    if (!is_running_stat(k)) n += static_cast<long>(v.size());
  return n;
}

ModelConfig tiny(Variant v, int levels = 4) {
  ModelConfig c;
  c.variant = v;
  c.width = 8;
  c.depth = 2;
  c.expansion = {1, 2};
  c.levels = levels;
  c.activation = ActKind::PRelu;
  return c;
}

}  // namespace

TEST_CASE("preset parameter counts") {
  struct Row {
    Variant v;
    int width;
    long params;
  };
  const Row rows[] = {{Variant::Fpn, 32, 63174},  {Variant::Fpn, 48, 99398},
                      {Variant::Fpn, 64, 164262}, {Variant::Ssd, 32, 55974},
                      {Variant::Ssd, 48, 84758},  {Variant::Ssd, 64, 139622}};
  for (const auto& r : rows) {
    auto cfg = ModelConfig::preset(r.v, r.width);
    CAPTURE(cfg.name());
    CHECK(trainable_count(build_model<float>(cfg, 1)) == r.params);
  }
}

TEST_CASE("config validation") {
  auto c = ModelConfig::preset(Variant::Fpn, 32);
  c.expansion.pop_back();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig::preset(Variant::Fpn, 32);
  c.expansion[0] = 2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_THROWS_AS(ModelConfig::preset(Variant::Fpn, 40), std::invalid_argument);
  CHECK(ModelConfig::preset(Variant::Ssd, 48, ActKind::LeakyRelu).name() == "EXTD-SSD-48-LReLU");
}

TEST_CASE("feature pyramid shapes at 640") {
  auto cfg = ModelConfig::preset(Variant::Fpn, 32);
  auto p = build_model<float>(cfg, 3);
  std::mt19937_64 rng(5);
  Tensor img = random_tensor<float>({1, 3, 640, 640}, rng, 0.0, 1.0);
  auto f = iterate_features(p, cfg, img);
  const int side[] = {160, 80, 40, 20, 10, 5};
  REQUIRE(f.maps.size() == 6);
  for (int i = 0; i < 6; ++i) {
    CHECK(f.maps[i].shape() == Shape{1, 32, side[i], side[i]});
    CHECK(f.strides[i] == (4 << i));
  }
  auto g = fpn_combine(p, cfg, f);
  CHECK(g.maps.front().identical(f.maps.back()));
  for (int i = 0; i < 6; ++i) CHECK(g.maps[i].shape() == f.maps[5 - i].shape());

  auto heads = heads_forward(p, cfg, g);
  REQUIRE(heads.size() == 6);
  for (int l = 0; l < 6; ++l) {
    CHECK(heads[l].cls.shape() == Shape{1, 2, side[l], side[l]});
    CHECK(heads[l].reg.shape() == Shape{1, 4, side[l], side[l]});
  }
}

TEST_CASE("input size must divide the coarsest stride") {
  auto cfg = tiny(Variant::Ssd);
  auto p = build_model<float>(cfg, 1);
  CHECK_THROWS_AS(infer(p, cfg, Tensor(1, 3, 48, 64)), std::invalid_argument);
  CHECK_THROWS_AS(infer(p, cfg, Tensor(1, 1, 64, 64)), std::invalid_argument);
}

TEST_CASE("skip connection adds the matching backbone map") {
  auto cfg = tiny(Variant::Fpn);
  auto p = build_model<double>(cfg, 2);
  std::mt19937_64 rng(9);
  auto f = iterate_features(p, cfg, random_tensor<double>({1, 3, 64, 64}, rng));
  auto base = fpn_combine(p, cfg, f);
  auto zeroed = f;
  const int n = cfg.levels;
  zeroed.maps[n - 2].fill(0.0);
  auto g0 = fpn_combine(p, cfg, zeroed);
  // g_2 = U_1(g_1) + f_{N-1}; U_1(g_1) does not depend on f_{N-1}.
  for (std::size_t i = 0; i < base.maps[1].size(); ++i) {
    CHECK(base.maps[1][i] - g0.maps[1][i] == doctest::Approx(f.maps[n - 2][i]).epsilon(1e-12));
  }
  CHECK(base.maps[0].identical(g0.maps[0]));
}

TEST_CASE("backbone is shared across passes") {
  auto c3 = tiny(Variant::Ssd, 3);
  auto c6 = tiny(Variant::Ssd, 6);
  auto p3 = build_model<float>(c3, 1);
  auto p6 = build_model<float>(c6, 1);
  long bb3 = 0, bb6 = 0;
  for (const auto& [k, v] : p3.tensors)
    if (k.rfind("F.", 0) == 0 && !is_running_stat(k)) bb3 += v.size();
  for (const auto& [k, v] : p6.tensors)
    if (k.rfind("F.", 0) == 0 && !is_running_stat(k)) bb6 += v.size();
  CHECK(bb3 == bb6);
  CHECK(bb3 > 0);

  // One backbone weight influences every level.
  auto cfg = tiny(Variant::Ssd, 4);
  auto p = build_model<double>(cfg, 4);
  std::mt19937_64 rng(1);
  TensorD img = random_tensor<double>({1, 3, 64, 64}, rng);
  auto before = iterate_features(p, cfg, img);
  p.at("F.ir1.expand.weight")[0] += 0.5;
  auto after = iterate_features(p, cfg, img);
  for (int l = 0; l < cfg.levels; ++l) {
    CAPTURE(l);
    CHECK_FALSE(before.maps[l].identical(after.maps[l]));
  }
}

TEST_CASE("determinism") {
  auto cfg = tiny(Variant::Fpn);
  CHECK(build_model<float>(cfg, 7).identical(build_model<float>(cfg, 7)));
  CHECK_FALSE(build_model<float>(cfg, 7).identical(build_model<float>(cfg, 8)));
  auto p = build_model<float>(cfg, 7);
  auto snapshot = p;
  std::mt19937_64 rng(3);
  Tensor img = random_tensor<float>({1, 3, 64, 64}, rng);
  auto a = infer(p, cfg, img);
  auto b = infer(p, cfg, img);
  for (std::size_t l = 0; l < a.size(); ++l) {
    CHECK(a[l].cls.identical(b[l].cls));
    CHECK(a[l].reg.identical(b[l].reg));
  }
  CHECK(p.identical(snapshot));
}

TEST_CASE("float and double builds agree") {
  auto cfg = tiny(Variant::Fpn);
  auto pd = build_model<double>(cfg, 11);
  auto pf = build_model<float>(cfg, 11);
  CHECK(pd.cast<float>().identical(pf));
}

TEST_CASE("per-pass running statistics") {
  auto cfg = tiny(Variant::Ssd, 3);
  cfg.bn_per_pass = true;
  auto p = build_model<double>(cfg, 1);
  CHECK(p.contains("F.ir0.dw_bn.running_mean.p1"));
  CHECK(p.contains("F.ir0.dw_bn.running_mean.p3"));
  CHECK_FALSE(p.contains("F.ir0.dw_bn.running_mean"));
  CHECK(p.contains("E.conv_bn.running_mean"));
  std::mt19937_64 rng(2);
  forward(p, cfg, random_tensor<double>({2, 3, 32, 32}, rng), RunOptions{BnMode::Train});
  CHECK_FALSE(p.at("F.ir0.dw_bn.running_mean.p1").identical(p.at("F.ir0.dw_bn.running_mean.p2")));
}

namespace {

void gradient_check(Variant v) {
  auto cfg = tiny(v, 4);
  auto p = build_model<double>(cfg, 21);
  std::mt19937_64 rng(17);
  TensorD img = random_tensor<double>({2, 3, 64, 64}, rng);
  const RunOptions train{BnMode::Train};

  // Fixed random projection of every head output, scaled so the objective is O(1).
  auto probe = forward(p, cfg, img, train);
  std::size_t total = 0;
  for (const auto& h : probe) total += h.cls.size() + h.reg.size();
  const double scale = 1.0 / static_cast<double>(total);
  std::vector<HeadOutput<double>> weights;
  for (const auto& h : probe) {
    weights.push_back({random_tensor<double>(h.cls.shape(), rng, -scale, scale),
                       random_tensor<double>(h.reg.shape(), rng, -scale, scale)});
  }
  auto objective = [&]() {
    auto out = forward(p, cfg, img, train);
    double s = 0.0;
    for (std::size_t l = 0; l < out.size(); ++l) {
      s += extd::testing::dot(out[l].cls, weights[l].cls);
      s += extd::testing::dot(out[l].reg, weights[l].reg);
    }
    return s;
  };

  ForwardTrace<double> trace;
  forward(p, cfg, img, train, &trace);
  auto grads = backward(p, cfg, trace, weights);

  std::mt19937_64 pick(5);
  int checked = 0;
  double worst = 0.0;
  for (auto& [name, tensor] : p.tensors) {
    if (is_running_stat(name)) continue;
    REQUIRE(grads.count(name) == 1);
    const auto& g = grads.at(name);
    REQUIRE(g.shape() == tensor.shape());
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, tensor.size() - 1)(pick);
      double* x = &tensor[i];
      const double numeric = extd::testing::numeric_grad(std::span<double>(x, 1), objective, 1e-6)[0];
      const double err = extd::testing::rel_err(g[i], numeric);
      if (err > worst) worst = err;
      if (err > 1e-3) {
        MESSAGE(name << "[" << i << "] analytic " << g[i] << " numeric " << numeric);
      }
      ++checked;
    }
  }
  CHECK(checked > 50);
  CHECK(worst < 1e-3);
  MESSAGE("worst relative error " << worst);
}

}  // namespace

TEST_CASE("end-to-end gradients, SSD") { gradient_check(Variant::Ssd); }
TEST_CASE("end-to-end gradients, FPN") { gradient_check(Variant::Fpn); }
