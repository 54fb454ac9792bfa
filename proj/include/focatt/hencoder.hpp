#pragma once

// Patch feature extractor trained with anatomic-site / primary-diagnosis labels.
//
// The diagnosis head produces one logit per diagnosis; a softmax restricted to
// each site's diagnoses gives P(diagnosis | site), and the marginal is
// P(diagnosis) = P(diagnosis | site_of(diagnosis)) * P(site_of(diagnosis)).
// Since every diagnosis has exactly one site, P(site | diagnosis) = 1.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "focatt/bagprep.hpp"
#include "focatt/checkpoint.hpp"
#include "focatt/hierarchy.hpp"
#include "focatt/nncore.hpp"

namespace focatt {

struct EncoderConfig {
  std::size_t input_dim = 32 * 32 * 3;
  std::size_t hidden = 64;
  std::size_t embed_dim = 64;
  /// Hidden width of both heads; 0 means a single linear layer.
  std::size_t head_hidden = 0;
  double dropout = 0.2;
};

struct HierEncoder {
  Mlp trunk;
  Mlp site_head;
  Mlp pd_head;
  HierarchyTable table;
  std::uint64_t seed = 0;

  static HierEncoder make(const HierarchyTable& table, const EncoderConfig& config, std::uint64_t seed);

  std::size_t input_dim() const { return trunk.input_dim(); }
  std::size_t embed_dim() const { return trunk.output_dim(); }
  /// Side length of the square RGB patch the trunk expects.
  std::size_t patch_side() const;
  std::vector<Mlp*> params() { return {&trunk, &site_head, &pd_head}; }
  void set_dropout_rate(double rate);
  void validate() const;
};

struct HierOutput {
  std::vector<double> p_site;
  /// Entry d is P(d | site_of(d)); sums to 1 within every site group.
  std::vector<double> p_pd_given_site;
  std::vector<double> p_pd_marginal;
};

/// Pure probability arithmetic on raw head logits.
HierOutput hier_probabilities(std::span<const double> site_logits, std::span<const double> pd_logits,
                              const HierarchyTable& table);

HierOutput hier_forward(const HierEncoder& enc, std::span<const double> patch_input);

struct HierLossWeights {
  double site = 0.5;
  double diagnosis = 0.5;
};

/// site_weight * CE(p_site, site) + diagnosis_weight * CE(p_pd_marginal, diagnosis).
double hier_loss(const HierOutput& out, const HierarchicalLabel& label, const HierarchyTable& table,
                 const HierLossWeights& weights = {});

struct HierGrads {
  GradientBuffer trunk;
  GradientBuffer site_head;
  GradientBuffer pd_head;

  explicit HierGrads(const HierEncoder& enc);
  std::vector<GradientBuffer> as_vector() const { return {trunk, site_head, pd_head}; }
  void zero();
  void scale(double f);
};

struct HierStepResult {
  double loss = 0.0;
  HierOutput output;
};

/// Forward, loss and exact gradients for one labeled input; gradients are added into `grads`.
HierStepResult hier_loss_and_grads(const HierEncoder& enc, std::span<const double> patch_input,
                                   const HierarchicalLabel& label, HierGrads& grads, Mode mode, Rng* rng,
                                   const HierLossWeights& weights = {});

/// Trunk embedding in inference mode.
std::vector<double> encode(const HierEncoder& enc, std::span<const double> patch_input);

/// Encoder as a patch -> feature function (patches are resized to the trunk input side).
/// `enc` must outlive the returned function.
PatchEncoder patch_encoder(const HierEncoder& enc);

struct LabeledInput {
  std::vector<double> input;
  HierarchicalLabel label;
};

struct FineTuneConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch = 16;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  HierLossWeights weights;
};

struct FineTuneResult {
  std::vector<double> loss_history;      // mean training loss per epoch
  std::vector<double> accuracy_history;  // diagnosis accuracy (marginal argmax) per epoch, inference mode
};

/// Adam over seeded shuffled mini-batches.
FineTuneResult fine_tune(HierEncoder& enc, std::span<const LabeledInput> data, const FineTuneConfig& config);

/// Fraction of inputs whose marginal argmax equals the labeled diagnosis.
double diagnosis_accuracy(const HierEncoder& enc, std::span<const LabeledInput> data);

Checkpoint encoder_checkpoint(const HierEncoder& enc);
HierEncoder encoder_from_checkpoint(const Checkpoint& ckpt);

}  // namespace focatt
