#include "focatt/nncore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "focatt/error.hpp"

namespace focatt {

namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

void apply_activation(Activation act, std::span<const double> pre, std::span<double> post) {
  switch (act) {
    case Activation::identity:
      std::copy(pre.begin(), pre.end(), post.begin());
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < pre.size(); ++i) post[i] = pre[i] > 0.0 ? pre[i] : 0.0;
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < pre.size(); ++i) post[i] = sigmoid(pre[i]);
      break;
    case Activation::softplus:
      for (std::size_t i = 0; i < pre.size(); ++i) post[i] = softplus(pre[i]);
      break;
    case Activation::softmax: {
      const auto s = softmax(pre);
      std::copy(s.begin(), s.end(), post.begin());
      break;
    }
  }
}

// Gradient w.r.t. pre-activation given gradient w.r.t. activation.
std::vector<double> activation_backward(Activation act, std::span<const double> pre, std::span<const double> post,
                                        std::span<const double> upstream) {
  std::vector<double> dz(upstream.size());
  switch (act) {
    case Activation::identity:
      std::copy(upstream.begin(), upstream.end(), dz.begin());
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = pre[i] > 0.0 ? upstream[i] : 0.0;
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = upstream[i] * post[i] * (1.0 - post[i]);
      break;
    case Activation::softplus:
      for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = upstream[i] * sigmoid(pre[i]);
      break;
    case Activation::softmax:
      dz = softmax_backward(post, upstream);
      break;
  }
  return dz;
}

void check_layer(const Dense& layer, std::size_t index) {
  const std::string where = "layer " + std::to_string(index);
  if (layer.in == 0 || layer.out == 0) throw ShapeError(where + " has a zero dimension");
  if (layer.weight.size() != layer.in * layer.out) throw ShapeError(where + " weight size mismatch");
  if (layer.bias.size() != layer.out) throw ShapeError(where + " bias size mismatch");
  if (!all_finite(layer.weight) || !all_finite(layer.bias)) throw NumericError(where + " has non-finite parameters");
}

}  // namespace

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softplus: return "softplus";
    case Activation::softmax: return "softmax";
  }
  return "unknown";
}

Activation activation_from_string(std::string_view name) {
  for (auto act : {Activation::identity, Activation::relu, Activation::sigmoid, Activation::softplus,
                   Activation::softmax}) {
    if (to_string(act) == name) return act;
  }
  throw ArgumentError("unknown activation: " + std::string(name));
}

Mlp::Mlp(std::vector<Dense> layers, double dropout_rate) : layers_(std::move(layers)) {
  set_dropout_rate(dropout_rate);
  validate();
}

Mlp Mlp::make(std::span<const std::size_t> widths, Activation hidden, Activation output, double dropout_rate,
              Rng& rng) {
  if (widths.size() < 2) throw ArgumentError("an Mlp needs at least an input and an output width");
  std::vector<Dense> layers;
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    Dense layer;
    layer.in = widths[k];
    layer.out = widths[k + 1];
    layer.activation = (k + 2 == widths.size()) ? output : hidden;
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
    layer.weight.resize(layer.in * layer.out);
    for (double& w : layer.weight) w = rng.uniform(-limit, limit);
    layer.bias.assign(layer.out, 0.0);
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers), dropout_rate);
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

void Mlp::set_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout rate must lie in [0, 1)");
  dropout_ = rate;
}

void Mlp::validate() const {
  if (layers_.empty()) throw ShapeError("Mlp has no layers");
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    check_layer(layers_[k], k);
    if (k > 0 && layers_[k - 1].out != layers_[k].in) {
      throw ShapeError("layer " + std::to_string(k) + " input does not match previous output");
    }
    if (layers_[k].activation == Activation::softmax && k + 1 != layers_.size()) {
      throw ShapeError("softmax is only allowed on the final layer");
    }
  }
}

std::vector<std::span<double>> Mlp::parameter_blocks() {
  std::vector<std::span<double>> blocks;
  for (auto& l : layers_) {
    blocks.emplace_back(l.weight);
    blocks.emplace_back(l.bias);
  }
  return blocks;
}

std::vector<std::span<const double>> Mlp::parameter_blocks() const {
  std::vector<std::span<const double>> blocks;
  for (const auto& l : layers_) {
    blocks.emplace_back(l.weight);
    blocks.emplace_back(l.bias);
  }
  return blocks;
}

bool operator==(const Dense& a, const Dense& b) {
  return a.in == b.in && a.out == b.out && a.activation == b.activation && a.weight == b.weight &&
         a.bias == b.bias;
}

bool operator==(const Mlp& a, const Mlp& b) { return a.dropout_ == b.dropout_ && a.layers_ == b.layers_; }

ForwardResult mlp_forward(const Mlp& net, std::span<const double> input, Mode mode, Rng* rng) {
  if (net.empty()) throw ShapeError("forward through an empty Mlp");
  if (input.size() != net.input_dim()) {
    throw ShapeError("input length " + std::to_string(input.size()) + " does not match Mlp input " +
                     std::to_string(net.input_dim()));
  }
  if (!all_finite(input)) throw NumericError("non-finite Mlp input");
  const bool dropout_on = mode == Mode::train && net.dropout_rate() > 0.0;
  if (dropout_on && rng == nullptr) throw ArgumentError("train-mode dropout needs an rng");

  const auto& layers = net.layers();
  ForwardResult result;
  ForwardCache& cache = result.cache;
  const std::size_t depth = layers.size();
  cache.inputs.resize(depth);
  cache.pre.resize(depth);
  cache.post.resize(depth);
  cache.masks.resize(depth);
  cache.shape.reserve(depth);

  std::vector<double> current(input.begin(), input.end());
  for (std::size_t k = 0; k < depth; ++k) {
    const Dense& layer = layers[k];
    cache.shape.emplace_back(layer.in, layer.out);
    std::vector<double>& z = cache.pre[k];
    z.assign(layer.bias.begin(), layer.bias.end());
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double* w = layer.weight.data() + o * layer.in;
      double acc = 0.0;
      for (std::size_t i = 0; i < layer.in; ++i) acc += w[i] * current[i];
      z[o] += acc;
    }
    std::vector<double>& a = cache.post[k];
    a.resize(layer.out);
    apply_activation(layer.activation, z, a);
    cache.inputs[k] = std::move(current);
    current = a;
    if (dropout_on && k + 1 < depth) {
      const double keep = 1.0 - net.dropout_rate();
      auto& mask = cache.masks[k];
      mask.resize(layer.out);
      for (std::size_t o = 0; o < layer.out; ++o) {
        mask[o] = rng->uniform() < keep ? 1.0 / keep : 0.0;
        current[o] *= mask[o];
      }
    }
  }
  if (!all_finite(current)) throw NumericError("non-finite Mlp output");
  result.output = std::move(current);
  return result;
}

std::vector<double> mlp_infer(const Mlp& net, std::span<const double> input) {
  return mlp_forward(net, input, Mode::infer).output;
}

GradientBuffer::GradientBuffer(const Mlp& net) {
  for (const auto& l : net.layers()) {
    layers_.push_back(DenseGrad{std::vector<double>(l.weight.size(), 0.0), std::vector<double>(l.bias.size(), 0.0)});
  }
}

void GradientBuffer::zero() {
  for (auto& l : layers_) {
    std::fill(l.weight.begin(), l.weight.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  accumulation_count = 0;
}

bool GradientBuffer::congruent_with(const Mlp& net) const {
  if (layers_.size() != net.layer_count()) return false;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    if (layers_[k].weight.size() != net.layers()[k].weight.size()) return false;
    if (layers_[k].bias.size() != net.layers()[k].bias.size()) return false;
  }
  return true;
}

double GradientBuffer::squared_norm() const {
  double s = 0.0;
  for (const auto& l : layers_) {
    for (double v : l.weight) s += v * v;
    for (double v : l.bias) s += v * v;
  }
  return s;
}

void GradientBuffer::scale(double factor) {
  for (auto& l : layers_) {
    for (double& v : l.weight) v *= factor;
    for (double& v : l.bias) v *= factor;
  }
}

void GradientBuffer::add(const GradientBuffer& other) {
  if (other.layers_.size() != layers_.size()) throw ShapeError("gradient buffers differ in depth");
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    auto& dst = layers_[k];
    const auto& src = other.layers_[k];
    if (dst.weight.size() != src.weight.size() || dst.bias.size() != src.bias.size()) {
      throw ShapeError("gradient buffers differ in shape");
    }
    for (std::size_t i = 0; i < dst.weight.size(); ++i) dst.weight[i] += src.weight[i];
    for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += src.bias[i];
  }
  accumulation_count += other.accumulation_count;
}

std::vector<std::span<double>> GradientBuffer::blocks() {
  std::vector<std::span<double>> out;
  for (auto& l : layers_) {
    out.emplace_back(l.weight);
    out.emplace_back(l.bias);
  }
  return out;
}

std::vector<std::span<const double>> GradientBuffer::blocks() const {
  std::vector<std::span<const double>> out;
  for (const auto& l : layers_) {
    out.emplace_back(l.weight);
    out.emplace_back(l.bias);
  }
  return out;
}

std::vector<double> mlp_backward_accumulate(const Mlp& net, const ForwardCache& cache,
                                            std::span<const double> output_gradient, GradientBuffer& grads) {
  const auto& layers = net.layers();
  if (cache.shape.size() != layers.size()) throw StateError("forward cache does not match this network");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (cache.shape[k] != std::make_pair(layers[k].in, layers[k].out)) {
      throw StateError("forward cache does not match this network");
    }
  }
  if (!grads.congruent_with(net)) throw ShapeError("gradient buffer is not congruent with the network");
  if (output_gradient.size() != net.output_dim()) throw ShapeError("output gradient length mismatch");

  std::vector<double> upstream(output_gradient.begin(), output_gradient.end());
  std::vector<double> input_grad;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const Dense& layer = layers[k];
    const auto dz = activation_backward(layer.activation, cache.pre[k], cache.post[k], upstream);
    auto& g = grads.layers()[k];
    const auto& x = cache.inputs[k];
    input_grad.assign(layer.in, 0.0);
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double d = dz[o];
      g.bias[o] += d;
      if (d == 0.0) continue;
      double* gw = g.weight.data() + o * layer.in;
      const double* w = layer.weight.data() + o * layer.in;
      for (std::size_t i = 0; i < layer.in; ++i) {
        gw[i] += d * x[i];
        input_grad[i] += d * w[i];
      }
    }
    if (k > 0) {
      upstream = input_grad;
      const auto& mask = cache.masks[k - 1];
      if (!mask.empty()) {
        for (std::size_t i = 0; i < upstream.size(); ++i) upstream[i] *= mask[i];
      }
    }
  }
  grads.accumulation_count += 1;
  return input_grad;
}

GradientBuffer mlp_backward(const Mlp& net, const ForwardCache& cache, std::span<const double> output_gradient) {
  GradientBuffer grads(net);
  mlp_backward_accumulate(net, cache, output_gradient, grads);
  return grads;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax of an empty vector");
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - top);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> upstream) {
  if (probs.size() != upstream.size()) throw ShapeError("softmax_backward length mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) dot += upstream[i] * probs[i];
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] * (upstream[i] - dot);
  return out;
}

double cross_entropy(std::span<const double> predicted, std::size_t target) {
  if (target >= predicted.size()) throw ArgumentError("cross_entropy target out of range");
  double sum = 0.0;
  for (double p : predicted) {
    if (!std::isfinite(p) || p < 0.0) throw NumericError("cross_entropy input is not a distribution");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw NumericError("cross_entropy input does not sum to 1");
  return -std::log(predicted[target] + kLogEpsilon);
}

double global_norm(std::span<const GradientBuffer> grads) {
  double s = 0.0;
  for (const auto& g : grads) s += g.squared_norm();
  return std::sqrt(s);
}

double clip_gradients(std::span<GradientBuffer> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ArgumentError("max_norm must be positive");
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient");
  // Slack of a few ulps so that clipping an already clipped set is a no-op.
  if (norm > max_norm * (1.0 + 1e-12)) {
    const double factor = max_norm / norm;
    for (auto& g : grads) g.scale(factor);
  }
  return norm;
}

OptimizerState OptimizerState::sgd(double lr, double momentum, double weight_decay) {
  OptimizerState s;
  s.kind = OptimizerKind::sgd_momentum;
  s.learning_rate = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

OptimizerState OptimizerState::adam(double lr, double weight_decay) {
  OptimizerState s;
  s.kind = OptimizerKind::adam;
  s.learning_rate = lr;
  s.momentum = 0.0;
  s.weight_decay = weight_decay;
  return s;
}

void optimizer_step(OptimizerState& state, std::span<Mlp* const> params, std::span<const GradientBuffer> grads) {
  if (params.size() != grads.size()) throw ShapeError("parameter and gradient sets differ in size");
  if (!(state.learning_rate >= 0.0)) throw ArgumentError("learning rate must be non-negative");
  if (!(state.momentum >= 0.0 && state.momentum < 1.0)) throw ArgumentError("momentum must lie in [0, 1)");
  if (!(state.weight_decay >= 0.0)) throw ArgumentError("weight decay must be non-negative");

  std::vector<std::span<double>> pblocks;
  std::vector<std::span<const double>> gblocks;
  for (std::size_t n = 0; n < params.size(); ++n) {
    if (!grads[n].congruent_with(*params[n])) throw ShapeError("gradient buffer is not congruent with parameters");
    for (auto b : params[n]->parameter_blocks()) pblocks.push_back(b);
    for (auto b : grads[n].blocks()) gblocks.push_back(b);
  }

  if (state.velocity.empty()) {
    for (auto b : pblocks) state.velocity.emplace_back(b.size(), 0.0);
    if (state.kind == OptimizerKind::adam) {
      for (auto b : pblocks) state.second_moment.emplace_back(b.size(), 0.0);
    }
  }
  if (state.velocity.size() != pblocks.size()) throw ShapeError("optimizer state does not match parameters");
  for (std::size_t b = 0; b < pblocks.size(); ++b) {
    if (state.velocity[b].size() != pblocks[b].size()) throw ShapeError("optimizer state does not match parameters");
  }

  state.step += 1;
  const double lr = state.learning_rate;
  const double wd = state.weight_decay;
  if (state.kind == OptimizerKind::sgd_momentum) {
    const double mu = state.momentum;
    for (std::size_t b = 0; b < pblocks.size(); ++b) {
      auto p = pblocks[b];
      auto g = gblocks[b];
      auto& v = state.velocity[b];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = mu * v[i] - lr * (g[i] + wd * p[i]);
        p[i] += v[i];
      }
    }
    return;
  }

  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (std::size_t b = 0; b < pblocks.size(); ++b) {
    auto p = pblocks[b];
    auto g = gblocks[b];
    auto& m = state.velocity[b];
    auto& v = state.second_moment[b];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] + wd * p[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

GradCheckReport grad_check(std::span<Mlp* const> nets, std::span<const GradientBuffer> analytic,
                           const std::function<double()>& loss, double tolerance, double h) {
  if (nets.size() != analytic.size()) throw ShapeError("grad_check: network and gradient counts differ");
  GradCheckReport report;
  for (std::size_t n = 0; n < nets.size(); ++n) {
    if (!analytic[n].congruent_with(*nets[n])) throw ShapeError("grad_check: gradient buffer shape mismatch");
    auto pblocks = nets[n]->parameter_blocks();
    auto gblocks = analytic[n].blocks();
    for (std::size_t b = 0; b < pblocks.size(); ++b) {
      for (std::size_t i = 0; i < pblocks[b].size(); ++i) {
        double& p = pblocks[b][i];
        const double saved = p;
        p = saved + h;
        const double up = loss();
        p = saved - h;
        const double down = loss();
        p = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double a = gblocks[b][i];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        const double rel = std::abs(a - numeric) / denom;
        ++report.parameters_checked;
        if (rel > report.max_relative_error) {
          report.max_relative_error = rel;
          report.worst_network = n;
          report.worst_block = b;
          report.worst_index = i;
          report.analytic_at_worst = a;
          report.numeric_at_worst = numeric;
        }
      }
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace focatt
