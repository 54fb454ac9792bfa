#include <cmath>
#include <set>

#include "doctest.h"

#include "focatt/error.hpp"
#include "focatt/synthgen.hpp"
#include "focatt/trainer.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace focatt;

namespace {

Bag labeled(std::vector<std::vector<double>> features, std::int32_t diagnosis, std::int32_t site = 0) {
  Bag b;
  b.slide_id = "b";
  b.features = std::move(features);
  b.label = {site, diagnosis};
  return b;
}

SynthSpec tiny_spec() {
  SynthSpec spec;
  spec.diagnoses_per_site = {1, 1};
  spec.bags_per_diagnosis = 24;
  spec.feature_dim = 6;
  spec.instances_min = 4;
  spec.instances_max = 6;
  return spec;
}

ModelConfig tiny_model(std::size_t dim, std::size_t classes) {
  ModelConfig mc;
  mc.input_dim = dim;
  mc.class_count = classes;
  mc.hidden = 8;
  mc.context_dim = 4;
  mc.transform_dim = 4;
  return mc;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.learning_rate == 0.01);
    CHECK(cfg.momentum == 0.9);
    CHECK(cfg.weight_decay == 1e-6);
    CHECK(cfg.clip_norm == 0.01);
    CHECK(cfg.epochs == 45);
    cfg.clip_norm = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
    cfg = {};
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
    cfg = {};
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  }

  TEST_CASE("AUC worked examples") {
    CHECK(auc_rank(std::vector<double>{0.9, 0.8, 0.1, 0.2}, std::vector<int>{1, 1, 0, 0}) == 1.0);
    CHECK(auc_rank(std::vector<double>{0.6, 0.4, 0.5, 0.3}, std::vector<int>{1, 1, 0, 0}) == 0.75);
    CHECK(auc_rank(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}) == 0.5);
    CHECK_THROWS(auc_rank(std::vector<double>{0.5, 0.7}, std::vector<int>{1, 1}));
  }

  TEST_CASE("rank AUC equals the pairwise count") {
    Rng rng(4);
    for (int t = 0; t < 300; ++t) {
      const std::size_t n = 2 + rng.below(99);
      std::vector<double> scores(n);
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        scores[i] = static_cast<double>(rng.below(1 + rng.below(20))) / 7.0;
        labels[i] = static_cast<int>(rng.below(2));
      }
      labels[0] = 1;
      labels[1] = 0;
      CHECK(auc_rank(scores, labels) == oracle::pairwise_auc(scores, labels));
    }
  }

  TEST_CASE("stratified split") {
    std::vector<Bag> bags;
    for (int i = 0; i < 40; ++i) bags.push_back(labeled({{static_cast<double>(i)}}, i % 2));
    bags.push_back(labeled({{99.0}}, 2));
    const auto split = split_train_validation(bags, 0.25, 3);
    CHECK(split.train.size() + split.validation.size() == bags.size());
    std::size_t zero = 0;
    for (const auto& b : split.validation) zero += b.label.diagnosis == 0;
    CHECK(zero == 5);
    std::set<double> seen;
    for (const auto& b : split.train) seen.insert(b.features[0][0]);
    for (const auto& b : split.validation) CHECK(seen.count(b.features[0][0]) == 0);
    const auto again = split_train_validation(bags, 0.25, 3);
    CHECK(again.validation == split.validation);
  }

  TEST_CASE("lr 0 leaves the model unchanged and selects epoch 0") {
    const auto data = generate_bags(tiny_spec());
    const auto model = FocAttModel::make(tiny_model(6, 2), 1);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    const auto split = split_train_validation(data.train, 0.15, 0);
    const auto res = train_mil(model, split.train, split.validation, cfg);
    auto expect = model;
    expect.set_dropout_rate(cfg.dropout);
    CHECK(res.last == expect);
    CHECK(res.best == expect);
    CHECK(res.best_epoch == 0);
    CHECK(res.history.front().epoch == 0);
    CHECK(res.history.front().split == "validation");
  }

  TEST_CASE("training is deterministic and the history agrees with evaluate") {
    const auto data = generate_bags(tiny_spec());
    const auto split = split_train_validation(data.train, 0.15, 2);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.seed = 2;
    const auto model = FocAttModel::make(tiny_model(6, 2), 2);
    const auto a = train_mil(model, split.train, split.validation, cfg);
    const auto b = train_mil(model, split.train, split.validation, cfg);
    CHECK(encode_checkpoint(model_checkpoint(a.best)) == encode_checkpoint(model_checkpoint(b.best)));
    CHECK(encode_checkpoint(model_checkpoint(a.last)) == encode_checkpoint(model_checkpoint(b.last)));

    const auto reloaded = model_from_checkpoint(decode_checkpoint(encode_checkpoint(model_checkpoint(a.best))));
    const auto report = evaluate(reloaded, split.validation);
    CHECK(report.accuracy == a.best_validation_accuracy);
    CHECK(report.loss == a.best_validation_loss);
    for (const auto& row : a.history) {
      if (row.split == "validation" && row.epoch == a.best_epoch) CHECK(row.accuracy == report.accuracy);
    }
  }

  TEST_CASE("class-count mismatch is an argument error") {
    const auto data = generate_bags(tiny_spec());
    const auto model = FocAttModel::make(tiny_model(6, 2), 0);
    auto bad = data.train;
    bad[0].label = {0, 3};
    CHECK_THROWS_AS(train_mil(model, bad, data.test, TrainConfig{}), ArgumentError);
    CHECK_THROWS_AS(train_mil(model, std::span<const Bag>{}, data.test, TrainConfig{}), ArgumentError);
  }

  TEST_CASE("evaluate") {
    ModelConfig mc = tiny_model(2, 2);
    mc.use_focal = false;
    mc.use_context_in_attention = false;
    auto m = FocAttModel::make(mc, 0);
    // the prediction net becomes "class = sign of feature 0"
    auto& last = m.prediction.layers().back();
    std::fill(last.weight.begin(), last.weight.end(), 0.0);
    std::fill(last.bias.begin(), last.bias.end(), 0.0);
    auto& first = m.prediction.layers().front();
    std::fill(first.weight.begin(), first.weight.end(), 0.0);
    std::fill(first.bias.begin(), first.bias.end(), 0.0);
    first.weight[0] = 1.0;  // hidden 0 = relu(x0)
    last.weight[1 * last.in + 0] = 50.0;
    last.bias[0] = 1.0;
    std::vector<Bag> bags{labeled({{1.0, 0.0}}, 1), labeled({{2.0, 5.0}}, 1), labeled({{-1.0, 0.0}}, 0),
                          labeled({{-3.0, 1.0}}, 0)};
    const auto rep = evaluate(m, bags);
    CHECK(rep.accuracy == 1.0);
    REQUIRE(rep.auc.has_value());
    CHECK(*rep.auc == 1.0);
    CHECK(rep.per_class_accuracy.at(0) == 1.0);
    CHECK(rep.predictions.size() == 4);
    CHECK_THROWS_AS(evaluate(m, std::span<const Bag>{}), ArgumentError);
  }

  TEST_CASE("vertical accuracy") {
    const std::vector<std::vector<double>> y{{0.1, 0.3, 0.6}, {0.5, 0.2, 0.3}, {0.2, 0.5, 0.3}};
    std::vector<Bag> bags{labeled({{0.0}}, 1), labeled({{0.0}}, 0), labeled({{0.0}}, 2, 1)};
    // unrestricted argmax of bag 0 is class 2, outside its group {0, 1}
    const std::vector<std::string> grouping{"g", "g", "h"};
    const auto table = vertical_accuracy(y, bags, grouping);
    CHECK(table.at("g").at(1) == 1.0);
    CHECK(table.at("g").at(0) == 1.0);
    CHECK(table.at("h").at(2) == 1.0);

    const std::vector<std::string> one{"all", "all", "all"};
    const auto flat = vertical_accuracy(y, bags, one);
    CHECK(flat.at("all").at(1) == 0.0);
    CHECK(flat.at("all").at(0) == 1.0);
    CHECK(flat.at("all").at(2) == 0.0);

    const std::vector<std::string> unmapped{"g", "g", ""};
    CHECK_THROWS_AS(vertical_accuracy(y, bags, unmapped), ArgumentError);
    const std::vector<std::string> short_grouping{"g", "g"};
    CHECK_THROWS_AS(vertical_accuracy(y, std::span(bags).first(1), short_grouping), ShapeError);
    CHECK_THROWS_AS(vertical_accuracy(std::span(y).last(1), std::span(bags).last(1), short_grouping), ArgumentError);
  }

  TEST_CASE("all-in-one grouping equals per-class accuracy") {
    const auto data = generate_bags(tiny_spec());
    const auto m = FocAttModel::make(tiny_model(6, 2), 4);
    const auto rep = evaluate(m, data.test);
    const std::vector<std::string> one(2, "all");
    const auto table = vertical_accuracy(rep.predictions, data.test, one);
    for (const auto& [d, acc] : rep.per_class_accuracy) CHECK(table.at("all").at(d) == acc);
  }

  TEST_CASE("history csv") {
    fixture::TempDir dir("hist");
    const std::vector<HistoryRow> rows{{0, "validation", 0.5, 0.25}, {1, "train", 0.125, 1.0}};
    write_history_csv(dir / "h.csv", rows);
    CHECK(fixture::slurp(dir / "h.csv") == "epoch,split,loss,accuracy\n0,validation,0.5,0.25\n1,train,0.125,1\n");
  }

  TEST_CASE("ablation suite is reproducible and carries the reference footer") {
    const auto data = generate_bags(tiny_spec());
    TrainConfig cfg;
    cfg.epochs = 2;
    const std::vector<std::uint64_t> seeds{0, 1};
    const auto variants = standard_ablation_variants();
    REQUIRE(variants.size() == 3);
    CHECK(variants[1].use_focal);
    CHECK_FALSE(variants[1].use_context_in_attention);
    CHECK_FALSE(variants[2].use_focal);
    const auto a = ablation_suite(data.train, data.test, tiny_model(6, 2), cfg, seeds, variants);
    const auto b = ablation_suite(data.train, data.test, tiny_model(6, 2), cfg, seeds, variants);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.mean_accuracy.size() == 3);
    const auto text = format_ablation_report(a);
    CHECK(text == format_ablation_report(b));
    CHECK(text.find("-4%") != std::string::npos);
    CHECK(text.find("-6%") != std::string::npos);
  }
}
