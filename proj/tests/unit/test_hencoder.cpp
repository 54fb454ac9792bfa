#include <cmath>

#include "doctest.h"

#include "focatt/error.hpp"
#include "focatt/hencoder.hpp"
#include "focatt/synthgen.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace focatt;

namespace {

HierarchyTable three_way() { return HierarchyTable({{"a", "s0"}, {"b", "s0"}, {"c", "s1"}}); }

HierEncoder small_encoder(const HierarchyTable& table, std::uint64_t seed, std::size_t head_hidden = 0) {
  EncoderConfig ec;
  ec.input_dim = 6;
  ec.hidden = 7;
  ec.embed_dim = 5;
  ec.head_hidden = head_hidden;
  ec.dropout = 0.0;
  return HierEncoder::make(table, ec, seed);
}

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

TEST_SUITE("hencoder") {
  TEST_CASE("hierarchy table parsing and checks") {
    const auto t = HierarchyTable::parse("# comment\nluad\tlung\n\nlusc\tlung\nkirc\tkidney\n");
    CHECK(t.site_count() == 2);
    CHECK(t.diagnosis_count() == 3);
    CHECK(t.sites()[0] == "lung");
    CHECK(t.site_of(2) == 1);
    CHECK(t.group(0) == std::vector<std::size_t>{0, 1});
    CHECK(t.label_for("kirc") == HierarchicalLabel{1, 2});
    CHECK(HierarchyTable::parse(t.serialize()) == t);
    CHECK_THROWS(HierarchyTable::parse("luad\tlung\nluad\tkidney\n"));
    CHECK_THROWS(HierarchyTable::parse("no-tab-here\n"));
    CHECK_THROWS_AS(t.check(HierarchicalLabel{0, 2}), ArgumentError);
    CHECK_THROWS(t.label_for("gbm"));
  }

  TEST_CASE("worked marginal example") {
    const auto t = three_way();
    // logits giving p_site [0.7, 0.3] and site-0 conditionals [0.6, 0.4]
    const std::vector<double> site{std::log(0.7), std::log(0.3)};
    const std::vector<double> pd{std::log(0.6), std::log(0.4), 5.0};
    const auto out = hier_probabilities(site, pd, t);
    CHECK(out.p_pd_marginal[0] == doctest::Approx(0.42).epsilon(1e-12));
    CHECK(out.p_pd_marginal[1] == doctest::Approx(0.28).epsilon(1e-12));
    CHECK(out.p_pd_marginal[2] == doctest::Approx(0.30).epsilon(1e-12));
    CHECK(hier_loss(out, HierarchicalLabel{0, 1}, t) == doctest::Approx(0.5 * -std::log(0.7) + 0.5 * -std::log(0.28)));
    CHECK(hier_loss(out, HierarchicalLabel{0, 1}, t) == doctest::Approx(0.8149).epsilon(1e-4));
    CHECK_THROWS_AS(hier_loss(out, HierarchicalLabel{1, 1}, t), ArgumentError);
  }

  TEST_CASE("symmetric logits") {
    const HierarchyTable t({{"a", "x"}, {"b", "x"}, {"c", "y"}, {"d", "y"}});
    const auto out = hier_probabilities(std::vector<double>(2, 0.0), std::vector<double>(4, 0.0), t);
    for (double p : out.p_site) CHECK(p == 0.5);
    for (double p : out.p_pd_marginal) CHECK(p == 0.25);
    CHECK(hier_loss(out, HierarchicalLabel{1, 3}, t) == doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(4.0)));
  }

  TEST_CASE("one site collapses to a plain softmax") {
    const HierarchyTable t({{"a", "x"}, {"b", "x"}, {"c", "x"}});
    const std::vector<double> pd{0.3, -1.0, 2.0};
    const auto out = hier_probabilities(std::vector<double>{4.0}, pd, t);
    const auto plain = oracle::softmax(pd);
    for (std::size_t d = 0; d < 3; ++d) CHECK(std::abs(out.p_pd_marginal[d] - plain[d]) <= 1e-15);
  }

  TEST_CASE("probabilities conserve mass per site and overall") {
    Rng rng(21);
    for (int t = 0; t < 200; ++t) {
      std::vector<std::pair<std::string, std::string>> pairs;
      const std::size_t sites = 1 + rng.below(4);
      for (std::size_t s = 0; s < sites; ++s) {
        const std::size_t k = 1 + rng.below(4);
        for (std::size_t d = 0; d < k; ++d) {
          pairs.emplace_back("d" + std::to_string(s) + "_" + std::to_string(d), "s" + std::to_string(s));
        }
      }
      const HierarchyTable table(pairs);
      std::vector<double> site(sites), pd(table.diagnosis_count());
      for (double& v : site) v = rng.normal(0.0, 5.0);
      for (double& v : pd) v = rng.normal(0.0, 5.0);
      const auto out = hier_probabilities(site, pd, table);
      CHECK(std::abs(sum(out.p_site) - 1.0) <= 1e-9);
      CHECK(std::abs(sum(out.p_pd_marginal) - 1.0) <= 1e-9);
      for (std::size_t s = 0; s < sites; ++s) {
        double group = 0.0;
        for (auto d : table.group(s)) group += out.p_pd_given_site[d];
        CHECK(std::abs(group - 1.0) <= 1e-9);
      }
    }
  }

  TEST_CASE("permuting site indices permutes p_site and keeps the loss") {
    const HierarchyTable a({{"a", "s0"}, {"b", "s0"}, {"c", "s1"}});
    const HierarchyTable b({{"c", "s1"}, {"a", "s0"}, {"b", "s0"}});
    const std::vector<double> site_a{0.4, -0.9};
    const std::vector<double> pd_a{1.0, -0.5, 0.2};
    const std::vector<double> site_b{-0.9, 0.4};
    const std::vector<double> pd_b{0.2, 1.0, -0.5};
    const auto oa = hier_probabilities(site_a, pd_a, a);
    const auto ob = hier_probabilities(site_b, pd_b, b);
    CHECK(oa.p_site[0] == ob.p_site[1]);
    CHECK(oa.p_site[1] == ob.p_site[0]);
    CHECK(hier_loss(oa, a.label_for("b"), a) == doctest::Approx(hier_loss(ob, b.label_for("b"), b)).epsilon(1e-15));
  }

  TEST_CASE("hier_loss gradients are exact") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const auto t = three_way();
      auto enc = small_encoder(t, seed, seed % 2 ? 4 : 0);
      Rng rng(seed + 40);
      fixture::jitter_biases({&enc.trunk, &enc.site_head, &enc.pd_head}, rng);
      std::vector<double> x(6);
      for (double& v : x) v = rng.normal();
      const auto label = t.label_for(seed % 3);
      HierGrads grads(enc);
      hier_loss_and_grads(enc, x, label, grads, Mode::infer, nullptr);
      auto nets = enc.params();
      const auto gv = grads.as_vector();
      const auto report = grad_check(nets, gv, [&] { return hier_loss(hier_forward(enc, x), label, t); }, 1e-4);
      CHECK_MESSAGE(report.passed, "seed " << seed << " error " << report.max_relative_error);
    }
  }

  TEST_CASE("encode is pure and a zero trunk gives a zero embedding") {
    const auto t = three_way();
    auto enc = small_encoder(t, 3);
    const std::vector<double> x{1, 2, 3, 4, 5, 6};
    CHECK(encode(enc, x) == encode(enc, x));
    for (auto& layer : enc.trunk.layers()) {
      std::fill(layer.weight.begin(), layer.weight.end(), 0.0);
      std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    }
    CHECK(encode(enc, x) == std::vector<double>(5, 0.0));
    CHECK_THROWS_AS(encode(enc, std::vector<double>{1, 2}), ShapeError);
  }

  TEST_CASE("seed-0 trunk on all ones matches its frozen embedding") {
    const auto t = three_way();
    EncoderConfig ec;
    ec.input_dim = 8 * 8 * 3;
    ec.hidden = 16;
    ec.embed_dim = 6;
    const auto enc = HierEncoder::make(t, ec, 0);
    const std::vector<double> ones(ec.input_dim, 1.0);
    const auto e = encode(enc, ones);
    const double frozen[] = {2.4638018283668317, 4.0587204191022153, 0.86829413522991505,
                             -4.553069348732107, -0.36654915962570483, 1.0453903859374514};
    const auto scalar = oracle::mlp_forward(enc.trunk, ones);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(std::abs(e[i] - frozen[i]) <= 1e-12);
      CHECK(std::abs(e[i] - scalar[i]) <= 1e-12);
    }
  }

  TEST_CASE("fine-tuning with lr 0 is a fixed point") {
    const auto t = three_way();
    auto enc = small_encoder(t, 1);
    const auto before = enc;
    std::vector<LabeledInput> data;
    Rng rng(2);
    for (int i = 0; i < 12; ++i) {
      std::vector<double> x(6);
      for (double& v : x) v = rng.normal();
      data.push_back({x, t.label_for(static_cast<std::size_t>(i % 3))});
    }
    FineTuneConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    cfg.batch = 4;
    const auto res = fine_tune(enc, data, cfg);
    CHECK(enc.trunk == before.trunk);
    CHECK(enc.site_head == before.site_head);
    CHECK(enc.pd_head == before.pd_head);
    REQUIRE(res.loss_history.size() == 3);
    CHECK(res.loss_history[0] == res.loss_history[2]);
    CHECK_THROWS_AS(fine_tune(enc, std::span<const LabeledInput>{}, cfg), ArgumentError);
  }

  TEST_CASE("fine-tuning learns the planted patch textures") {
    SynthSpec spec;
    spec.patches_per_diagnosis = 50;
    const auto table = synth_hierarchy(spec);
    std::vector<LabeledInput> data;
    for (const auto& lp : generate_labeled_patches(spec)) data.push_back({patch_to_input(lp.patch), lp.label});
    auto enc = HierEncoder::make(table, EncoderConfig{}, 0);
    const auto res = fine_tune(enc, data, FineTuneConfig{});
    CHECK(res.loss_history.size() == 20);
    CHECK(res.loss_history.back() < res.loss_history.front());
    CHECK(res.accuracy_history.back() >= 0.9);
  }

  TEST_CASE("encoder checkpoints round-trip") {
    const auto t = three_way();
    const auto enc = small_encoder(t, 5, 3);
    const auto back = encoder_from_checkpoint(decode_checkpoint(encode_checkpoint(encoder_checkpoint(enc))));
    CHECK(back.table == t);
    CHECK(back.trunk == enc.trunk);
    CHECK(back.pd_head == enc.pd_head);
    CHECK(back.seed == 5);
  }
}
