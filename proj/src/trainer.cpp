#include "focatt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "focatt/error.hpp"
#include "focatt/parallel.hpp"

namespace focatt {

namespace {

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void check_bags(const FocAttModel& model, std::span<const Bag> bags, const char* what) {
  if (bags.empty()) throw ArgumentError(std::string(what) + " set is empty");
  for (const auto& bag : bags) {
    if (bag_target(bag) >= model.class_count()) {
      throw ArgumentError("bag '" + bag.slide_id + "' has diagnosis " + std::to_string(bag.label.diagnosis) +
                          " but the model has " + std::to_string(model.class_count()) + " classes");
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ArgumentError("learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ArgumentError("weight decay must be >= 0");
  if (!(clip_norm > 0.0)) throw ArgumentError("clip norm must be > 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ArgumentError("dropout must lie in [0, 1)");
  if (epochs == 0) throw ArgumentError("epochs must be >= 1");
  if (batch == 0) throw ArgumentError("batch must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ArgumentError("validation fraction must lie in (0, 1)");
  }
}

std::size_t bag_target(const Bag& bag) {
  if (bag.label.diagnosis < 0) throw ArgumentError("bag '" + bag.slide_id + "' is unlabeled");
  return static_cast<std::size_t>(bag.label.diagnosis);
}

BagSplit split_train_validation(std::span<const Bag> bags, double validation_fraction, std::uint64_t seed) {
  if (bags.empty()) throw ArgumentError("cannot split an empty bag set");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < bags.size(); ++i) by_class[bag_target(bags[i])].push_back(i);

  Rng rng(seed);
  std::vector<bool> held(bags.size(), false);
  for (auto& [cls, idx] : by_class) {
    rng.shuffle(std::span<std::size_t>(idx));
    auto take = static_cast<std::size_t>(std::lround(validation_fraction * static_cast<double>(idx.size())));
    if (idx.size() >= 2) take = std::clamp<std::size_t>(take, 1, idx.size() - 1);
    else take = 0;
    for (std::size_t k = 0; k < take; ++k) held[idx[k]] = true;
  }
  BagSplit split;
  for (std::size_t i = 0; i < bags.size(); ++i) (held[i] ? split.validation : split.train).push_back(bags[i]);
  return split;
}

EvalReport evaluate(const FocAttModel& model, std::span<const Bag> bags) {
  check_bags(model, bags, "evaluation");
  EvalReport report;
  report.predictions.resize(bags.size());
  parallel_for(bags.size(), [&](std::size_t i) { report.predictions[i] = forward(model, bags[i]).y; });

  std::map<std::size_t, std::pair<std::size_t, std::size_t>> per_class;  // hits, total
  std::size_t hits = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const std::size_t t = bag_target(bags[i]);
    const bool hit = argmax(report.predictions[i]) == t;
    hits += hit;
    loss += cross_entropy(report.predictions[i], t);
    auto& [h, n] = per_class[t];
    h += hit;
    ++n;
  }
  const auto n = static_cast<double>(bags.size());
  report.accuracy = static_cast<double>(hits) / n;
  report.loss = loss / n;
  for (const auto& [cls, counts] : per_class) {
    report.per_class_accuracy[cls] = static_cast<double>(counts.first) / static_cast<double>(counts.second);
  }
  if (model.class_count() == 2 && per_class.size() == 2) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < bags.size(); ++i) {
      scores.push_back(report.predictions[i][1]);
      labels.push_back(bag_target(bags[i]) == 1 ? 1 : 0);
    }
    report.auc = auc_rank(scores, labels);
  }
  return report;
}

TrainResult train_mil(const FocAttModel& initial, std::span<const Bag> train, std::span<const Bag> validation,
                      const TrainConfig& config) {
  config.validate();
  initial.validate();
  check_bags(initial, train, "training");
  check_bags(initial, validation, "validation");

  FocAttModel model = initial;
  model.set_dropout_rate(config.dropout);
  Rng rng(config.seed);
  auto state = OptimizerState::sgd(config.learning_rate, config.momentum, config.weight_decay);
  ModelGrads grads(model);
  auto params = model.params();

  TrainResult result;
  auto record_validation = [&](std::size_t epoch) {
    const auto report = evaluate(model, validation);
    result.history.push_back({epoch, "validation", report.loss, report.accuracy});
    const bool better = epoch == 0 || report.accuracy > result.best_validation_accuracy ||
                        (report.accuracy == result.best_validation_accuracy && report.loss < result.best_validation_loss);
    if (better) {
      result.best = model;
      result.best_epoch = epoch;
      result.best_validation_accuracy = report.accuracy;
      result.best_validation_loss = report.loss;
    }
  };
  record_validation(0);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t end = std::min(order.size(), start + config.batch);
      grads.zero();
      for (std::size_t k = start; k < end; ++k) {
        const Bag& bag = train[order[k]];
        const auto step = bag_loss_and_grads(model, bag, bag_target(bag), grads, Mode::train, &rng);
        loss_sum += step.loss;
        hits += argmax(step.output.y) == bag_target(bag);
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      auto gv = grads.as_vector();
      clip_gradients(gv, config.clip_norm);
      optimizer_step(state, params, gv);
    }
    const auto n = static_cast<double>(train.size());
    result.history.push_back({epoch, "train", loss_sum / n, static_cast<double>(hits) / n});
    record_validation(epoch);
  }
  result.last = model;
  return result;
}

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,split,loss,accuracy\n";
  out.precision(17);
  for (const auto& row : history) out << row.epoch << ',' << row.split << ',' << row.loss << ',' << row.accuracy << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

double auc_rank(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (double s : scores) {
    if (std::isnan(s)) throw NumericError("AUC score is NaN");
  }
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // ranks are 1-based; tied blocks share the average rank, kept doubled to stay integral
  std::uint64_t doubled_rank_sum = 0;
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const std::uint64_t doubled_mid = (i + 1) + j;  // (first rank + last rank)
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] == 1) {
        doubled_rank_sum += doubled_mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::uint64_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw ArgumentError("AUC needs both positive and negative examples");
  // U statistic doubled: 2 R - P (P + 1) counts ties as one half each
  const std::uint64_t doubled_u = doubled_rank_sum - pos * (pos + 1);
  return static_cast<double>(doubled_u) / (2.0 * static_cast<double>(pos * neg));
}

std::vector<std::string> site_grouping(const HierarchyTable& table) {
  std::vector<std::string> grouping(table.diagnosis_count());
  for (std::size_t d = 0; d < grouping.size(); ++d) grouping[d] = table.sites()[table.site_of(d)];
  return grouping;
}

VerticalTable vertical_accuracy(std::span<const std::vector<double>> predictions, std::span<const Bag> bags,
                                std::span<const std::string> grouping) {
  if (predictions.size() != bags.size()) throw ShapeError("one prediction per bag is required");
  std::map<std::string, std::map<std::size_t, std::pair<std::size_t, std::size_t>>> counts;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const std::size_t t = bag_target(bags[i]);
    if (t >= grouping.size() || grouping[t].empty()) {
      throw ArgumentError("diagnosis " + std::to_string(t) + " of bag '" + bags[i].slide_id + "' has no group");
    }
    const auto& y = predictions[i];
    if (y.size() != grouping.size()) throw ShapeError("prediction width differs from the grouping");
    // argmax within the group; renormalising does not move the argmax, ties go to the lowest index
    std::size_t best = t;
    double best_v = -1.0;
    for (std::size_t d = 0; d < y.size(); ++d) {
      if (grouping[d] == grouping[t] && y[d] > best_v) {
        best_v = y[d];
        best = d;
      }
    }
    auto& [hits, total] = counts[grouping[t]][t];
    hits += best == t;
    ++total;
  }
  VerticalTable table;
  for (const auto& [group, per_diag] : counts) {
    for (const auto& [d, c] : per_diag) {
      table[group][d] = static_cast<double>(c.first) / static_cast<double>(c.second);
    }
  }
  return table;
}

VerticalTable vertical_accuracy(const FocAttModel& model, std::span<const Bag> bags,
                                std::span<const std::string> grouping) {
  const auto report = evaluate(model, bags);
  return vertical_accuracy(report.predictions, bags, grouping);
}

std::string format_vertical_table(const VerticalTable& table, const HierarchyTable& hierarchy) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(4);
  for (const auto& [group, per_diag] : table) {
    out << group << '\n';
    for (const auto& [d, acc] : per_diag) {
      const std::string name = d < hierarchy.diagnosis_count() ? hierarchy.diagnoses()[d] : std::to_string(d);
      out << "  " << name << '\t' << acc << '\n';
    }
  }
  return out.str();
}

std::vector<AblationVariant> standard_ablation_variants() {
  return {{"full", true, true}, {"no-context-attention", false, true}, {"no-focal-and-no-context", false, false}};
}

AblationReport ablation_suite(std::span<const Bag> train, std::span<const Bag> test, const ModelConfig& model_config,
                              const TrainConfig& config, std::span<const std::uint64_t> seeds,
                              std::span<const AblationVariant> variants) {
  if (seeds.empty() || variants.empty()) throw ArgumentError("ablation needs at least one seed and one variant");
  AblationReport report;
  report.seeds.assign(seeds.begin(), seeds.end());
  for (const auto& v : variants) report.variants.push_back(v.name);
  report.accuracy.assign(variants.size(), std::vector<double>(seeds.size(), 0.0));

  // every (variant, seed) run is independent; slots keep the report order fixed
  parallel_for(variants.size() * seeds.size(), [&](std::size_t job) {
    const std::size_t v = job / seeds.size();
    const std::size_t s = job % seeds.size();
    ModelConfig mc = model_config;
    mc.use_context_in_attention = variants[v].use_context_in_attention;
    mc.use_focal = variants[v].use_focal;
    TrainConfig tc = config;
    tc.seed = seeds[s];
    const auto split = split_train_validation(train, tc.validation_fraction, seeds[s]);
    const auto model = FocAttModel::make(mc, seeds[s]);
    const auto trained = train_mil(model, split.train, split.validation, tc);
    report.accuracy[v][s] = evaluate(trained.best, test).accuracy;
  });
  for (const auto& row : report.accuracy) {
    report.mean_accuracy.push_back(std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size()));
  }
  return report;
}

std::string format_ablation_report(const AblationReport& report) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(4);
  out << "variant";
  for (auto s : report.seeds) out << "\tseed" << s;
  out << "\tmean\n";
  for (std::size_t v = 0; v < report.variants.size(); ++v) {
    out << report.variants[v];
    for (double a : report.accuracy[v]) out << '\t' << a;
    out << '\t' << report.mean_accuracy[v] << '\n';
  }
  out << "# reference deltas on real slides (not asserted here): "
         "no-context-attention -4%, no-focal-and-no-context -6%\n";
  return out.str();
}

}  // namespace focatt
