#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"

#include "focatt/error.hpp"
#include "focatt/model.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace focatt;

namespace {

FocAttModel small_model(std::uint64_t seed, Pool pool = Pool::mean, bool ctx = true, bool focal = true,
                        std::size_t classes = 2) {
  ModelConfig mc;
  mc.input_dim = 4;
  mc.class_count = classes;
  mc.hidden = 6;
  mc.context_dim = 3;
  mc.transform_dim = 3;
  mc.pool = pool;
  mc.use_context_in_attention = ctx;
  mc.use_focal = focal;
  mc.dropout = 0.0;
  return FocAttModel::make(mc, seed);
}

void zero_last_layer(Mlp& net, double bias = 0.0) {
  auto& last = net.layers().back();
  std::fill(last.weight.begin(), last.weight.end(), 0.0);
  std::fill(last.bias.begin(), last.bias.end(), bias);
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST_SUITE("focatt") {
  TEST_CASE("context of a singleton is theta of its instance") {
    Rng rng(1);
    const auto bag = fixture::random_bag(rng, 1, 4);
    for (Pool pool : {Pool::sum, Pool::mean, Pool::max}) {
      const auto m = small_model(2, pool);
      CHECK(wsi_context(m, bag) == mlp_infer(m.theta, bag.features[0]));
    }
  }

  TEST_CASE("mean context of a repeated instance is theta of it") {
    Rng rng(2);
    auto bag = fixture::random_bag(rng, 1, 4);
    bag.features.assign(5, bag.features[0]);
    const auto m = small_model(3, Pool::mean);
    const auto g = wsi_context(m, bag);
    const auto t = mlp_infer(m.theta, bag.features[0]);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(t[i]).epsilon(1e-15));
  }

  TEST_CASE("max context is the elementwise maximum") {
    Rng rng(3);
    const auto bag = fixture::random_bag(rng, 3, 4);
    const auto m = small_model(4, Pool::max);
    const auto g = wsi_context(m, bag);
    for (std::size_t k = 0; k < g.size(); ++k) {
      double top = -1e300;
      for (const auto& x : bag.features) top = std::max(top, oracle::mlp_forward(m.theta, x)[k]);
      CHECK(std::abs(g[k] - top) <= 1e-12);
    }
    CHECK_THROWS_AS(wsi_context(m, Bag{}), ArgumentError);
  }

  TEST_CASE("instance predictions") {
    Rng rng(4);
    auto bag = fixture::random_bag(rng, 3, 4);
    auto m = small_model(0, Pool::mean, true, true, 3);
    const auto rows = instance_predictions(m, bag);
    for (std::size_t i = 0; i < 3; ++i) CHECK(rows[i] == mlp_forward(m.prediction, bag.features[i], Mode::infer).output);
    std::swap(bag.features[0], bag.features[2]);
    const auto swapped = instance_predictions(m, bag);
    CHECK(swapped[0] == rows[2]);
    CHECK(swapped[2] == rows[0]);
    zero_last_layer(m.prediction);
    for (const auto& row : instance_predictions(m, bag)) {
      for (double v : row) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
    CHECK_THROWS_AS(instance_predictions(m, fixture::random_bag(rng, 2, 5)), ShapeError);
  }

  TEST_CASE("attention values") {
    Rng rng(5);
    auto bag = fixture::random_bag(rng, 4, 4);
    auto m = small_model(1);
    const auto g = wsi_context(m, bag);
    for (double a : attention_values(m, bag, g)) {
      CHECK(a > 0.0);
      CHECK(a < 1.0);
    }
    auto forced = m;
    zero_last_layer(forced.attention);
    for (double a : attention_values(forced, bag, g)) CHECK(a == 0.5);

    bag.features[1] = bag.features[0];
    const auto same = attention_values(m, bag, g);
    CHECK(same[0] == same[1]);
    CHECK_THROWS_AS(attention_values(m, bag, std::vector<double>{1.0}), ShapeError);
  }

  TEST_CASE("changing one instance moves every attention only when context is used") {
    Rng rng(6);
    const auto bag = fixture::random_bag(rng, 4, 4);
    auto other = bag;
    for (double& v : other.features[3]) v += 1.5;
    for (bool ctx : {true, false}) {
      const auto m = small_model(0, Pool::mean, ctx);
      const auto a = forward(m, bag).a;
      const auto b = forward(m, other).a;
      std::size_t changed = 0;
      for (std::size_t i = 0; i < 3; ++i) changed += a[i] != b[i];
      if (ctx) {
        CHECK(changed == 3);
      } else {
        CHECK(changed == 0);
      }
      CHECK(a[3] != b[3]);
    }
  }

  TEST_CASE("focal factor") {
    auto m = small_model(2);
    zero_last_layer(m.focal);
    const std::vector<double> g(3, 0.7);
    for (double v : focal_factor(m, g)) CHECK(v == doctest::Approx(std::log(2.0) + kFocalFloor).epsilon(1e-15));
    zero_last_layer(m.focal, -800.0);
    for (double v : focal_factor(m, g)) {
      CHECK(v > 0.0);
      CHECK(v == doctest::Approx(kFocalFloor).epsilon(1e-9));
    }
    const auto off = small_model(2, Pool::mean, true, false);
    CHECK_THROWS_AS(focal_factor(off, g), ContractError);
    Rng rng(1);
    CHECK(forward(off, fixture::random_bag(rng, 3, 4)).gamma == std::vector<double>{1.0, 1.0});
  }

  TEST_CASE("aggregation worked examples") {
    const auto y = aggregate({{0.8, 0.2}, {0.4, 0.6}}, std::vector<double>{1, 1}, std::vector<double>{1.0, 0.5});
    CHECK(y[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(aggregate({{0.3, 0.7}}, std::vector<double>{1, 1}, std::vector<double>{1}) == std::vector<double>{0.3, 0.7});
    const auto sym = aggregate({{0.5, 0.5}}, std::vector<double>{2, 2}, std::vector<double>{1});
    CHECK(sym == std::vector<double>{0.5, 0.5});
    const auto zero = aggregate({{1.0, 0.0}, {0.5, 0.5}}, std::vector<double>{0.5, 3.0}, std::vector<double>{1, 1});
    CHECK(std::abs(sum(zero) - 1.0) <= 1e-15);
  }

  TEST_CASE("aggregation preconditions") {
    CHECK_THROWS(aggregate({{0.8, 0.3}}, std::vector<double>{1, 1}, std::vector<double>{1}));
    CHECK_THROWS(aggregate({{0.8, 0.2}}, std::vector<double>{0, 1}, std::vector<double>{1}));
    CHECK_THROWS(aggregate({{0.8, 0.2}}, std::vector<double>{1, 1}, std::vector<double>{0}));
    CHECK_THROWS(aggregate({{0.8, 0.2}}, std::vector<double>{1, 1}, std::vector<double>{1.5}));
    CHECK_THROWS(aggregate({{0.8, 0.2}}, std::vector<double>{1, 1}, std::vector<double>{1, 1}));
    CHECK_THROWS(aggregate({{1.0, 0.0}, {1.0, 0.0}}, std::vector<double>{1, 1}, std::vector<double>{0.0, 0.0}));
  }

  TEST_CASE("rescaling every attention leaves y unchanged") {
    const std::vector<std::vector<double>> p{{0.7, 0.3}, {0.125, 0.875}, {0.5, 0.5}};
    const std::vector<double> gamma{0.75, 1.5};
    const std::vector<double> a{0.25, 0.5, 0.125};
    std::vector<double> scaled(a);
    for (double& v : scaled) v *= 2.0;  // power of two, stays within [0, 1]
    CHECK(aggregate(p, gamma, a) == aggregate(p, gamma, scaled));
  }

  TEST_CASE("gamma of ones reduces to the attention-weighted mean") {
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
      const std::size_t n = 1 + rng.below(6), c = 2 + rng.below(3);
      std::vector<std::vector<double>> p;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> z(c);
        for (double& v : z) v = rng.normal();
        p.push_back(oracle::softmax(z));
      }
      std::vector<double> a(n);
      for (double& v : a) v = 0.05 + 0.95 * rng.uniform();
      const auto y = aggregate(p, std::vector<double>(c, 1.0), a);
      std::vector<double> mean(c, 0.0);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) mean[j] += a[i] * p[i][j];
        total += a[i];
      }
      for (std::size_t j = 0; j < c; ++j) CHECK(std::abs(y[j] - mean[j] / total) <= 1e-12);
    }
  }

  TEST_CASE("both flags off matches the simple attention MIL oracle") {
    Rng rng(8);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto m = small_model(seed, Pool::mean, false, false, 3);
      const auto bag = fixture::random_bag(rng, 2 + rng.below(5), 4);
      const auto y = forward(m, bag).y;
      const auto want = oracle::simple_attention_mil(m, bag);
      for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(y[j] - want[j]) <= 1e-12);
      CHECK(bag_loss(m, bag, 1) == doctest::Approx(-std::log(want[1] + 1e-12)).epsilon(1e-12));
    }
  }

  TEST_CASE("a duplicated bag gives the same y under mean pooling") {
    Rng rng(9);
    const auto bag = fixture::random_bag(rng, 5, 4);
    auto doubled = bag;
    doubled.features.insert(doubled.features.end(), bag.features.begin(), bag.features.end());
    const auto m = small_model(3, Pool::mean);
    const auto a = forward(m, bag).y;
    const auto b = forward(m, doubled).y;
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::abs(a[j] - b[j]) <= 1e-12);
  }

  TEST_CASE("forward is permutation invariant, bitwise with canonical reduction") {
    Rng rng(10);
    for (int t = 0; t < 50; ++t) {
      auto mc = fixture::random_config(rng, 5);
      mc.canonical_reduction = true;
      const auto m = FocAttModel::make(mc, rng.next());
      auto bag = fixture::random_bag(rng, 1 + rng.below(12), 5);
      const auto base = forward(m, bag);
      std::vector<std::size_t> perm(bag.size());
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(std::span<std::size_t>(perm));
      Bag shuffled = bag;
      for (std::size_t i = 0; i < perm.size(); ++i) shuffled.features[i] = bag.features[perm[i]];
      const auto out = forward(m, shuffled);
      CHECK(out.y == base.y);
      CHECK(out.g == base.g);
      for (std::size_t i = 0; i < perm.size(); ++i) {
        CHECK(out.a[i] == base.a[perm[i]]);
        CHECK(out.p[i] == base.p[perm[i]]);
      }
    }
  }

  TEST_CASE("output invariants hold over random models and bags") {
    Rng rng(11);
    for (int t = 0; t < 300; ++t) {
      const auto m = FocAttModel::make(fixture::random_config(rng, 3), rng.next());
      const auto out = forward(m, fixture::random_bag(rng, 1 + rng.below(10), 3, 0.5 + 3.0 * rng.uniform()));
      CHECK(std::abs(sum(out.y) - 1.0) <= 1e-9);
      for (double v : out.y) CHECK(v >= 0.0);
      for (const auto& row : out.p) CHECK(std::abs(sum(row) - 1.0) <= 1e-9);
      for (double a : out.a) {
        CHECK(a > 0.0);
        CHECK(a < 1.0);
      }
      if (m.use_focal) {
        for (double g : out.gamma) CHECK(g >= kFocalFloor);
      }
    }
  }

  TEST_CASE("bag_loss_and_grads matches finite differences") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      Rng rng(seed + 50);
      auto m = small_model(seed, static_cast<Pool>(seed % 3), seed % 2 == 0, seed % 4 != 3, 2 + seed % 2);
      fixture::jitter_biases(m.params(), rng);
      const auto bag = fixture::random_bag(rng, 3, 4);
      const std::size_t target = seed % m.class_count();
      ModelGrads grads(m);
      const auto res = bag_loss_and_grads(m, bag, target, grads);
      CHECK(res.loss == doctest::Approx(bag_loss(m, bag, target)).epsilon(1e-15));
      auto nets = m.params();
      const auto gv = grads.as_vector();
      const auto report = grad_check(nets, gv, [&] { return bag_loss(m, bag, target); }, 1e-4);
      CHECK_MESSAGE(report.passed, "seed " << seed << " error " << report.max_relative_error);
    }
  }

  TEST_CASE("saturated prediction gives near-zero loss and gradients") {
    auto m = small_model(0, Pool::mean, true, false);
    zero_last_layer(m.prediction);
    m.prediction.layers().back().bias = {60.0, -60.0};
    Rng rng(1);
    const auto bag = fixture::random_bag(rng, 3, 4);
    ModelGrads grads(m);
    const auto res = bag_loss_and_grads(m, bag, 0, grads);
    CHECK(res.loss < 1e-11);
    double norm = 0.0;
    for (const auto& g : grads.as_vector()) norm += g.squared_norm();
    CHECK(std::sqrt(norm) < 1e-10);
    CHECK_THROWS(bag_loss_and_grads(m, bag, 2, grads));
  }

  TEST_CASE("model checkpoints keep flags and parameters") {
    const auto m = small_model(7, Pool::max, false, true, 3);
    const auto back = model_from_checkpoint(decode_checkpoint(encode_checkpoint(model_checkpoint(m))));
    CHECK(back == m);
    auto ck = model_checkpoint(m);
    for (auto& [k, v] : ck.meta) {
      if (k == "pool") v = "median";
    }
    CHECK_THROWS(model_from_checkpoint(ck));
  }
}
