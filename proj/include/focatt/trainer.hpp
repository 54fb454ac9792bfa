#pragma once

// Bag-level training loop, evaluation metrics, vertical classification and
// the ablation comparison.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "focatt/bagprep.hpp"
#include "focatt/hierarchy.hpp"
#include "focatt/model.hpp"

namespace focatt {

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  double clip_norm = 0.01;
  double dropout = 0.2;
  std::size_t epochs = 45;
  std::uint64_t seed = 0;
  std::size_t batch = 1;
  /// Share of the training bags held out for validation by split_train_validation.
  double validation_fraction = 0.15;

  /// Throws ArgumentError on out-of-range values (clip_norm <= 0, epochs == 0, ...).
  void validate() const;
};

/// Class index a bag is trained against: its diagnosis.
std::size_t bag_target(const Bag& bag);

struct BagSplit {
  std::vector<Bag> train;
  std::vector<Bag> validation;
};

/// Seeded, label-stratified split. Every class with at least two bags keeps at
/// least one bag on each side.
BagSplit split_train_validation(std::span<const Bag> bags, double validation_fraction, std::uint64_t seed);

struct HistoryRow {
  std::size_t epoch = 0;
  std::string split;  // "train" or "validation"
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  FocAttModel best;  // parameters at the best validation epoch
  FocAttModel last;  // parameters after the final epoch
  std::size_t best_epoch = 0;
  double best_validation_accuracy = 0.0;
  double best_validation_loss = 0.0;
  std::vector<HistoryRow> history;
};

/// SGD with momentum over seeded shuffles. Epoch 0 records the untrained
/// model. The best epoch maximises validation accuracy, then minimises
/// validation loss, then is the earliest.
TrainResult train_mil(const FocAttModel& initial, std::span<const Bag> train, std::span<const Bag> validation,
                      const TrainConfig& config);

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> history);

/// Mann-Whitney AUC with midranks for ties. labels: 1 positive, anything else negative.
double auc_rank(std::span<const double> scores, std::span<const int> labels);

struct EvalReport {
  double accuracy = 0.0;
  double loss = 0.0;  // mean cross-entropy
  std::map<std::size_t, double> per_class_accuracy;  // classes present in the set
  std::optional<double> auc;                          // 2-class models with both classes present
  std::vector<std::vector<double>> predictions;       // y per bag, input order
};

EvalReport evaluate(const FocAttModel& model, std::span<const Bag> bags);

/// group name -> diagnosis index -> accuracy.
using VerticalTable = std::map<std::string, std::map<std::size_t, double>>;

/// Argmax of each y restricted to the diagnoses sharing the bag's group.
/// `grouping[d]` is the group of diagnosis d.
VerticalTable vertical_accuracy(std::span<const std::vector<double>> predictions, std::span<const Bag> bags,
                                std::span<const std::string> grouping);
VerticalTable vertical_accuracy(const FocAttModel& model, std::span<const Bag> bags,
                                std::span<const std::string> grouping);
/// Groups diagnoses by anatomic site.
std::vector<std::string> site_grouping(const HierarchyTable& table);

std::string format_vertical_table(const VerticalTable& table, const HierarchyTable& hierarchy);

struct AblationVariant {
  std::string name;
  bool use_context_in_attention = true;
  bool use_focal = true;
};

/// full, no-context-attention, no-focal-and-no-context.
std::vector<AblationVariant> standard_ablation_variants();

struct AblationReport {
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> accuracy;  // [variant][seed], held-out
  std::vector<double> mean_accuracy;          // per variant
};

/// Trains every variant for every seed on the same split and scores it on `test`.
/// The seed drives model initialisation, the validation split and training.
AblationReport ablation_suite(std::span<const Bag> train, std::span<const Bag> test, const ModelConfig& model_config,
                              const TrainConfig& config, std::span<const std::uint64_t> seeds,
                              std::span<const AblationVariant> variants);

/// Side-by-side accuracies plus a footer with the reference deltas seen on real slides.
std::string format_ablation_report(const AblationReport& report);

}  // namespace focatt
