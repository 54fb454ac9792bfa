#pragma once

// Attention-with-focus multiple-instance model.
//
// For a bag X = {x_1..x_n}:
//   g      = pool(theta(x_1), ..., theta(x_n))            bag context
//   p_i    = softmax(prediction(x_i))                      per-instance class probabilities
//   a_i    = sigmoid(attention([transform(x_i), g]))       per-instance attention in (0, 1)
//   gamma  = softplus(focal(g)) + 1e-6                     per-class focal exponent
//   y(j)   = sum_i p_i(j)^gamma(j) * a_i, then y /= sum(y)
//
// Two ablation switches drop g from the attention input and replace gamma by
// a vector of ones.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "focatt/bagprep.hpp"
#include "focatt/checkpoint.hpp"
#include "focatt/nncore.hpp"

namespace focatt {

enum class Pool : std::uint8_t { sum = 0, mean = 1, max = 2 };

std::string_view to_string(Pool pool);
Pool pool_from_string(std::string_view name);

inline constexpr double kFocalFloor = 1e-6;

struct ModelConfig {
  std::size_t input_dim = 64;
  std::size_t class_count = 2;
  std::size_t hidden = 64;
  std::size_t context_dim = 64;
  std::size_t transform_dim = 64;
  Pool pool = Pool::mean;
  bool use_context_in_attention = true;
  bool use_focal = true;
  double dropout = 0.2;
  /// Reduce over instances in a content-sorted order so outputs are bitwise
  /// independent of bag order.
  bool canonical_reduction = true;
};

struct FocAttModel {
  Mlp prediction;  // x -> class probabilities (softmax)
  Mlp theta;       // x -> context embedding
  Mlp transform;   // x -> transformed instance
  Mlp attention;   // [transform(x), g] -> scalar (sigmoid)
  Mlp focal;       // g -> gamma (softplus)
  Pool pool = Pool::mean;
  bool use_context_in_attention = true;
  bool use_focal = true;
  bool canonical_reduction = true;
  std::uint64_t seed = 0;

  static FocAttModel make(const ModelConfig& config, std::uint64_t seed);

  std::size_t input_dim() const { return prediction.input_dim(); }
  std::size_t class_count() const { return prediction.output_dim(); }
  std::size_t context_dim() const { return theta.output_dim(); }

  std::vector<Mlp*> params() { return {&prediction, &theta, &transform, &attention, &focal}; }
  void set_dropout_rate(double rate);
  void validate() const;

  friend bool operator==(const FocAttModel&, const FocAttModel&) = default;
};

struct BagOutput {
  std::vector<std::vector<double>> p;  // n x c
  std::vector<double> a;               // n
  std::vector<double> gamma;           // c
  std::vector<double> g;               // context
  std::vector<double> y;               // c, a distribution
};

/// Instance processing order: ascending lexicographic feature content when
/// canonical reduction is on, bag order otherwise.
std::vector<std::size_t> reduction_order(const FocAttModel& model, const Bag& bag);

std::vector<double> wsi_context(const FocAttModel& model, const Bag& bag);
std::vector<std::vector<double>> instance_predictions(const FocAttModel& model, const Bag& bag);
std::vector<double> attention_values(const FocAttModel& model, const Bag& bag, std::span<const double> g);
/// Throws ContractError when the model has the focal factor disabled.
std::vector<double> focal_factor(const FocAttModel& model, std::span<const double> g);

/// y(j) = sum_i p_i(j)^gamma(j) a_i normalised to sum 1, with 0^gamma = 0.
std::vector<double> aggregate(const std::vector<std::vector<double>>& p, std::span<const double> gamma,
                              std::span<const double> a);

BagOutput forward(const FocAttModel& model, const Bag& bag, Mode mode = Mode::infer, Rng* rng = nullptr);

struct ModelGrads {
  GradientBuffer prediction;
  GradientBuffer theta;
  GradientBuffer transform;
  GradientBuffer attention;
  GradientBuffer focal;

  explicit ModelGrads(const FocAttModel& model);
  std::vector<GradientBuffer> as_vector() const { return {prediction, theta, transform, attention, focal}; }
  std::vector<GradientBuffer*> buffers() { return {&prediction, &theta, &transform, &attention, &focal}; }
  void zero();
  void scale(double f);
};

struct BagLoss {
  double loss = 0.0;
  BagOutput output;
};

/// Cross-entropy of y against `target`, with exact gradients added into `grads`.
BagLoss bag_loss_and_grads(const FocAttModel& model, const Bag& bag, std::size_t target, ModelGrads& grads,
                           Mode mode = Mode::infer, Rng* rng = nullptr);

/// Loss only (no gradients), inference mode.
double bag_loss(const FocAttModel& model, const Bag& bag, std::size_t target);

/// Checkpoint with metadata: kind, pool, use_context_in_attention, use_focal,
/// canonical_reduction, class_count.
Checkpoint model_checkpoint(const FocAttModel& model);
FocAttModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace focatt
