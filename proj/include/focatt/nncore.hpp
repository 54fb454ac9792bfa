#pragma once

// Minimal differentiable substrate: dense layers with a fixed activation per
// layer, exact reverse-mode gradients, losses, clipping, and optimizers.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "focatt/rng.hpp"

namespace focatt {

enum class Activation : std::uint8_t { identity = 0, relu = 1, sigmoid = 2, softplus = 3, softmax = 4 };
enum class Mode { train, infer };

std::string_view to_string(Activation act);
Activation activation_from_string(std::string_view name);

/// Epsilon inside every logarithm of a probability.
inline constexpr double kLogEpsilon = 1e-12;

/// One fully connected layer: out = act(W in + b), W stored row-major out x in.
struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;
  std::vector<double> bias;
  Activation activation = Activation::identity;
};

class Mlp {
 public:
  Mlp() = default;
  /// Validates the chain of dimensions, finiteness, and softmax placement.
  Mlp(std::vector<Dense> layers, double dropout_rate);

  /// Builds a network with `widths.size() - 1` layers and Xavier-uniform
  /// weights (limit sqrt(6 / (fan_in + fan_out))); biases start at zero.
  static Mlp make(std::span<const std::size_t> widths, Activation hidden, Activation output,
                  double dropout_rate, Rng& rng);

  std::size_t input_dim() const { return layers_.front().in; }
  std::size_t output_dim() const { return layers_.back().out; }
  std::size_t layer_count() const { return layers_.size(); }
  std::size_t parameter_count() const;
  bool empty() const { return layers_.empty(); }

  const std::vector<Dense>& layers() const { return layers_; }
  std::vector<Dense>& layers() { return layers_; }

  double dropout_rate() const { return dropout_; }
  void set_dropout_rate(double rate);

  /// Throws if any invariant is broken (shape chain, finiteness, softmax last).
  void validate() const;

  /// Weight/bias vectors in declaration order: w0, b0, w1, b1, ...
  std::vector<std::span<double>> parameter_blocks();
  std::vector<std::span<const double>> parameter_blocks() const;

  friend bool operator==(const Mlp& a, const Mlp& b);

 private:
  std::vector<Dense> layers_;
  double dropout_ = 0.0;
};

bool operator==(const Dense& a, const Dense& b);

/// Everything a backward pass needs from the matching forward pass.
struct ForwardCache {
  std::vector<std::vector<double>> inputs;       // input seen by each layer, after dropout
  std::vector<std::vector<double>> pre;          // pre-activations
  std::vector<std::vector<double>> post;         // activations, before dropout
  std::vector<std::vector<double>> masks;        // dropout scale per hidden layer; empty when off
  std::vector<std::pair<std::size_t, std::size_t>> shape;
};

struct ForwardResult {
  std::vector<double> output;
  ForwardCache cache;
};

/// `rng` is required in train mode when the network has dropout.
ForwardResult mlp_forward(const Mlp& net, std::span<const double> input, Mode mode, Rng* rng = nullptr);

/// Inference-mode forward without a cache.
std::vector<double> mlp_infer(const Mlp& net, std::span<const double> input);

struct DenseGrad {
  std::vector<double> weight;
  std::vector<double> bias;
};

class GradientBuffer {
 public:
  GradientBuffer() = default;
  explicit GradientBuffer(const Mlp& net);

  void zero();
  bool congruent_with(const Mlp& net) const;
  double squared_norm() const;
  void scale(double factor);
  void add(const GradientBuffer& other);

  std::vector<DenseGrad>& layers() { return layers_; }
  const std::vector<DenseGrad>& layers() const { return layers_; }
  std::vector<std::span<double>> blocks();
  std::vector<std::span<const double>> blocks() const;

  std::size_t accumulation_count = 0;

 private:
  std::vector<DenseGrad> layers_;
};

/// Gradients of one forward pass, in a fresh buffer.
GradientBuffer mlp_backward(const Mlp& net, const ForwardCache& cache, std::span<const double> output_gradient);

/// Adds the gradients of one forward pass into `grads` and returns the gradient
/// with respect to the network input.
std::vector<double> mlp_backward_accumulate(const Mlp& net, const ForwardCache& cache,
                                            std::span<const double> output_gradient, GradientBuffer& grads);

/// Numerically stable softmax.
std::vector<double> softmax(std::span<const double> logits);

/// Vector-Jacobian product of softmax: s * (g - <g, s>).
std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> upstream);

/// -log(predicted[target] + kLogEpsilon). `predicted` must sum to 1 within 1e-6.
double cross_entropy(std::span<const double> predicted, std::size_t target);

/// Rescales all buffers together so the global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
double clip_gradients(std::span<GradientBuffer> grads, double max_norm);

double global_norm(std::span<const GradientBuffer> grads);

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  // One tensor per parameter block across all networks, in order.
  std::vector<std::vector<double>> velocity;  // SGD velocity or Adam first moment
  std::vector<std::vector<double>> second_moment;

  static OptimizerState sgd(double lr, double momentum, double weight_decay);
  static OptimizerState adam(double lr, double weight_decay = 0.0);
};

/// SGD: v <- mu v - lr (g + wd p); p <- p + v.
/// Adam: bias-corrected first/second moments on g + wd p.
void optimizer_step(OptimizerState& state, std::span<Mlp* const> params, std::span<const GradientBuffer> grads);

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t parameters_checked = 0;
  std::size_t worst_network = 0;
  std::size_t worst_block = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = true;
};

/// Compares `analytic` against central differences of `loss` with step `h`,
/// perturbing every parameter of every network in turn. Relative error is
/// |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport grad_check(std::span<Mlp* const> nets, std::span<const GradientBuffer> analytic,
                           const std::function<double()>& loss, double tolerance, double h = 1e-5);

}  // namespace focatt
