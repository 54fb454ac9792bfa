#include "focatt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>

#include "focatt/error.hpp"

namespace focatt {

std::string_view to_string(Pool pool) {
  switch (pool) {
    case Pool::sum: return "sum";
    case Pool::mean: return "mean";
    case Pool::max: return "max";
  }
  return "unknown";
}

Pool pool_from_string(std::string_view name) {
  for (auto p : {Pool::sum, Pool::mean, Pool::max}) {
    if (to_string(p) == name) return p;
  }
  throw ArgumentError("unknown pool: " + std::string(name));
}

FocAttModel FocAttModel::make(const ModelConfig& config, std::uint64_t seed) {
  if (config.input_dim == 0 || config.class_count < 2 || config.hidden == 0 || config.context_dim == 0 ||
      config.transform_dim == 0) {
    throw ArgumentError("model dimensions must be positive and class_count >= 2");
  }
  Rng rng(seed);
  FocAttModel m;
  m.pool = config.pool;
  m.use_context_in_attention = config.use_context_in_attention;
  m.use_focal = config.use_focal;
  m.canonical_reduction = config.canonical_reduction;
  m.seed = seed;
  const double drop = config.dropout;
  const std::size_t pred_w[] = {config.input_dim, config.hidden, config.class_count};
  const std::size_t theta_w[] = {config.input_dim, config.hidden, config.context_dim};
  const std::size_t transform_w[] = {config.input_dim, config.hidden, config.transform_dim};
  const std::size_t attention_in = config.transform_dim + (config.use_context_in_attention ? config.context_dim : 0);
  const std::size_t attention_w[] = {attention_in, config.hidden, 1};
  const std::size_t focal_w[] = {config.context_dim, config.hidden, config.class_count};
  m.prediction = Mlp::make(pred_w, Activation::relu, Activation::softmax, drop, rng);
  m.theta = Mlp::make(theta_w, Activation::relu, Activation::relu, drop, rng);
  m.transform = Mlp::make(transform_w, Activation::relu, Activation::relu, drop, rng);
  m.attention = Mlp::make(attention_w, Activation::relu, Activation::sigmoid, drop, rng);
  m.focal = Mlp::make(focal_w, Activation::relu, Activation::softplus, drop, rng);
  return m;
}

void FocAttModel::set_dropout_rate(double rate) {
  for (auto* net : params()) net->set_dropout_rate(rate);
}

void FocAttModel::validate() const {
  for (const Mlp* net : {&prediction, &theta, &transform, &attention, &focal}) net->validate();
  const std::size_t d = prediction.input_dim();
  if (theta.input_dim() != d || transform.input_dim() != d) throw ShapeError("sub-networks disagree on input dim");
  if (prediction.layers().back().activation != Activation::softmax) {
    throw ShapeError("prediction network must end in softmax");
  }
  if (attention.output_dim() != 1 || attention.layers().back().activation != Activation::sigmoid) {
    throw ShapeError("attention network must end in a single sigmoid unit");
  }
  const std::size_t expect_att = transform.output_dim() + (use_context_in_attention ? theta.output_dim() : 0);
  if (attention.input_dim() != expect_att) throw ShapeError("attention input width does not match the ablation flag");
  if (focal.input_dim() != theta.output_dim() || focal.output_dim() != prediction.output_dim()) {
    throw ShapeError("focal network must map the context to one exponent per class");
  }
  if (focal.layers().back().activation != Activation::softplus) throw ShapeError("focal network must end in softplus");
}

std::vector<std::size_t> reduction_order(const FocAttModel& model, const Bag& bag) {
  std::vector<std::size_t> order(bag.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (model.canonical_reduction) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::lexicographical_compare(bag.features[a].begin(), bag.features[a].end(), bag.features[b].begin(),
                                          bag.features[b].end());
    });
  }
  return order;
}

namespace {

void check_bag(const FocAttModel& model, const Bag& bag) {
  if (bag.features.empty()) throw ArgumentError("bag '" + bag.slide_id + "' is empty");
  for (const auto& f : bag.features) {
    if (f.size() != model.input_dim()) {
      throw ShapeError("instance dimension " + std::to_string(f.size()) + " does not match model input " +
                       std::to_string(model.input_dim()));
    }
  }
}

std::vector<double> focal_from_output(std::vector<double> softplus_out) {
  for (double& v : softplus_out) v += kFocalFloor;
  return softplus_out;
}

// y_raw(j) = sum_i p_i(j)^gamma(j) a_i, reduced in `order`. Also returns the powers.
std::vector<double> raw_aggregate(const std::vector<std::vector<double>>& p, std::span<const double> gamma,
                                  std::span<const double> a, std::span<const std::size_t> order,
                                  std::vector<std::vector<double>>* powers) {
  const std::size_t c = gamma.size();
  std::vector<double> raw(c, 0.0);
  if (powers) powers->assign(p.size(), std::vector<double>(c, 0.0));
  for (auto i : order) {
    for (std::size_t j = 0; j < c; ++j) {
      const double pw = p[i][j] > 0.0 ? std::pow(p[i][j], gamma[j]) : 0.0;
      if (powers) (*powers)[i][j] = pw;
      raw[j] += pw * a[i];
    }
  }
  return raw;
}

std::vector<double> normalise(std::span<const double> raw, double& total) {
  total = 0.0;
  for (double v : raw) total += v;
  if (!(total > 0.0) || !std::isfinite(total)) throw NumericError("aggregated prediction has zero mass");
  std::vector<double> y(raw.size());
  for (std::size_t j = 0; j < raw.size(); ++j) y[j] = raw[j] / total;
  return y;
}

struct Trace {
  std::vector<std::size_t> order;
  std::vector<ForwardResult> theta_fw, pred_fw, transform_fw, attention_fw;
  std::optional<ForwardResult> focal_fw;
  std::vector<std::size_t> max_source;  // per context dim, instance holding the max
  std::vector<std::vector<double>> powers;
  std::vector<double> raw;
  double raw_total = 0.0;
  BagOutput out;
};

Trace run_forward(const FocAttModel& model, const Bag& bag, Mode mode, Rng* rng) {
  check_bag(model, bag);
  const std::size_t n = bag.size();
  Trace t;
  t.order = reduction_order(model, bag);
  t.theta_fw.resize(n);
  t.pred_fw.resize(n);
  t.transform_fw.resize(n);
  t.attention_fw.resize(n);

  // context
  const std::size_t ctx = model.context_dim();
  auto& g = t.out.g;
  g.assign(ctx, 0.0);
  t.max_source.assign(ctx, t.order.front());
  bool first = true;
  for (auto i : t.order) {
    t.theta_fw[i] = mlp_forward(model.theta, bag.features[i], mode, rng);
    const auto& e = t.theta_fw[i].output;
    for (std::size_t k = 0; k < ctx; ++k) {
      if (model.pool == Pool::max) {
        if (first || e[k] > g[k]) {
          g[k] = e[k];
          t.max_source[k] = i;
        }
      } else {
        g[k] += e[k];
      }
    }
    first = false;
  }
  if (model.pool == Pool::mean) {
    for (double& v : g) v /= static_cast<double>(n);
  }

  // per-instance predictions and attention
  t.out.p.resize(n);
  t.out.a.resize(n);
  for (auto i : t.order) {
    t.pred_fw[i] = mlp_forward(model.prediction, bag.features[i], mode, rng);
    t.out.p[i] = t.pred_fw[i].output;
  }
  for (auto i : t.order) {
    t.transform_fw[i] = mlp_forward(model.transform, bag.features[i], mode, rng);
    std::vector<double> att_in = t.transform_fw[i].output;
    if (model.use_context_in_attention) att_in.insert(att_in.end(), g.begin(), g.end());
    t.attention_fw[i] = mlp_forward(model.attention, att_in, mode, rng);
    t.out.a[i] = t.attention_fw[i].output[0];
  }

  // focal factor
  if (model.use_focal) {
    t.focal_fw = mlp_forward(model.focal, g, mode, rng);
    t.out.gamma = focal_from_output(t.focal_fw->output);
  } else {
    t.out.gamma.assign(model.class_count(), 1.0);
  }

  t.raw = raw_aggregate(t.out.p, t.out.gamma, t.out.a, t.order, &t.powers);
  t.out.y = normalise(t.raw, t.raw_total);
  return t;
}

}  // namespace

std::vector<double> wsi_context(const FocAttModel& model, const Bag& bag) {
  return run_forward(model, bag, Mode::infer, nullptr).out.g;
}

std::vector<std::vector<double>> instance_predictions(const FocAttModel& model, const Bag& bag) {
  check_bag(model, bag);
  std::vector<std::vector<double>> p;
  p.reserve(bag.size());
  for (const auto& x : bag.features) p.push_back(mlp_infer(model.prediction, x));
  return p;
}

std::vector<double> attention_values(const FocAttModel& model, const Bag& bag, std::span<const double> g) {
  check_bag(model, bag);
  if (model.use_context_in_attention && g.size() != model.context_dim()) {
    throw ShapeError("context length does not match the attention network");
  }
  std::vector<double> a;
  a.reserve(bag.size());
  for (const auto& x : bag.features) {
    auto in = mlp_infer(model.transform, x);
    if (model.use_context_in_attention) in.insert(in.end(), g.begin(), g.end());
    a.push_back(mlp_infer(model.attention, in)[0]);
  }
  return a;
}

std::vector<double> focal_factor(const FocAttModel& model, std::span<const double> g) {
  if (!model.use_focal) throw ContractError("focal factor requested from a model with the focal factor disabled");
  if (g.size() != model.context_dim()) throw ShapeError("context length does not match the focal network");
  return focal_from_output(mlp_infer(model.focal, g));
}

std::vector<double> aggregate(const std::vector<std::vector<double>>& p, std::span<const double> gamma,
                              std::span<const double> a) {
  if (p.empty()) throw ArgumentError("aggregate needs at least one instance");
  if (a.size() != p.size()) throw ShapeError("attention count differs from instance count");
  const std::size_t c = gamma.size();
  for (const auto& row : p) {
    if (row.size() != c) throw ShapeError("probability row length differs from gamma length");
    double s = 0.0;
    for (double v : row) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw NumericError("probability row has invalid entries");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw NumericError("probability row does not sum to 1");
  }
  for (double gm : gamma) {
    if (!(gm > 0.0) || !std::isfinite(gm)) throw NumericError("gamma must be positive");
  }
  bool any = false;
  for (double v : a) {
    if (!(v >= 0.0 && v <= 1.0)) throw NumericError("attention values must lie in [0, 1]");
    any = any || v > 0.0;
  }
  if (!any) throw NumericError("all attention values are zero");
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double total = 0.0;
  return normalise(raw_aggregate(p, gamma, a, order, nullptr), total);
}

BagOutput forward(const FocAttModel& model, const Bag& bag, Mode mode, Rng* rng) {
  return run_forward(model, bag, mode, rng).out;
}

ModelGrads::ModelGrads(const FocAttModel& model)
    : prediction(model.prediction),
      theta(model.theta),
      transform(model.transform),
      attention(model.attention),
      focal(model.focal) {}

void ModelGrads::zero() {
  for (auto* b : buffers()) b->zero();
}

void ModelGrads::scale(double f) {
  for (auto* b : buffers()) b->scale(f);
}

BagLoss bag_loss_and_grads(const FocAttModel& model, const Bag& bag, std::size_t target, ModelGrads& grads,
                           Mode mode, Rng* rng) {
  if (target >= model.class_count()) throw ArgumentError("target class out of range");
  Trace t = run_forward(model, bag, mode, rng);
  const auto& out = t.out;
  const std::size_t c = model.class_count();
  const std::size_t ctx = model.context_dim();
  const std::size_t n = bag.size();

  BagLoss res;
  res.loss = cross_entropy(out.y, target);

  // through the normalisation y = raw / sum(raw); only y[target] has upstream gradient
  const double gy_t = -1.0 / (out.y[target] + kLogEpsilon);
  std::vector<double> g_raw(c);
  for (std::size_t j = 0; j < c; ++j) g_raw[j] = ((j == target ? gy_t : 0.0) - gy_t * out.y[target]) / t.raw_total;

  std::vector<double> g_ctx(ctx, 0.0);
  std::vector<double> g_gamma(c, 0.0);
  const std::size_t tdim = model.transform.output_dim();
  for (auto i : t.order) {
    const auto& p = out.p[i];
    const auto& pw = t.powers[i];
    const double a = out.a[i];
    double g_a = 0.0;
    std::vector<double> g_p(c, 0.0);
    for (std::size_t j = 0; j < c; ++j) {
      g_a += g_raw[j] * pw[j];
      if (p[j] > 0.0) {
        g_p[j] = g_raw[j] * a * out.gamma[j] * pw[j] / p[j];
        g_gamma[j] += g_raw[j] * a * pw[j] * std::log(std::max(p[j], kLogEpsilon));
      }
    }
    mlp_backward_accumulate(model.prediction, t.pred_fw[i].cache, g_p, grads.prediction);
    const double g_a_vec[] = {g_a};
    const auto g_att_in = mlp_backward_accumulate(model.attention, t.attention_fw[i].cache, g_a_vec, grads.attention);
    const std::span<const double> g_t(g_att_in.data(), tdim);
    mlp_backward_accumulate(model.transform, t.transform_fw[i].cache, g_t, grads.transform);
    if (model.use_context_in_attention) {
      for (std::size_t k = 0; k < ctx; ++k) g_ctx[k] += g_att_in[tdim + k];
    }
  }

  if (model.use_focal) {
    const auto g_focal_in = mlp_backward_accumulate(model.focal, t.focal_fw->cache, g_gamma, grads.focal);
    for (std::size_t k = 0; k < ctx; ++k) g_ctx[k] += g_focal_in[k];
  }

  const bool context_used = model.use_context_in_attention || model.use_focal;
  if (context_used) {
    std::vector<double> g_e(ctx);
    for (auto i : t.order) {
      for (std::size_t k = 0; k < ctx; ++k) {
        switch (model.pool) {
          case Pool::sum: g_e[k] = g_ctx[k]; break;
          case Pool::mean: g_e[k] = g_ctx[k] / static_cast<double>(n); break;
          case Pool::max: g_e[k] = t.max_source[k] == i ? g_ctx[k] : 0.0; break;
        }
      }
      mlp_backward_accumulate(model.theta, t.theta_fw[i].cache, g_e, grads.theta);
    }
  }

  res.output = std::move(t.out);
  return res;
}

double bag_loss(const FocAttModel& model, const Bag& bag, std::size_t target) {
  if (target >= model.class_count()) throw ArgumentError("target class out of range");
  return cross_entropy(forward(model, bag).y, target);
}

Checkpoint model_checkpoint(const FocAttModel& model) {
  model.validate();
  Checkpoint ckpt;
  ckpt.seed = model.seed;
  ckpt.meta = {{"kind", "focatt"},
               {"pool", std::string(to_string(model.pool))},
               {"use_context_in_attention", model.use_context_in_attention ? "1" : "0"},
               {"use_focal", model.use_focal ? "1" : "0"},
               {"canonical_reduction", model.canonical_reduction ? "1" : "0"},
               {"class_count", std::to_string(model.class_count())}};
  ckpt.networks = {{"prediction", model.prediction},
                   {"theta", model.theta},
                   {"transform", model.transform},
                   {"attention", model.attention},
                   {"focal", model.focal}};
  return ckpt;
}

FocAttModel model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.require_meta("kind") != "focatt") throw IoError("checkpoint does not hold a FocAtt model");
  auto flag = [&](const std::string& key) {
    const auto& v = ckpt.require_meta(key);
    if (v != "0" && v != "1") throw IoError("bad boolean for " + key);
    return v == "1";
  };
  FocAttModel m;
  m.seed = ckpt.seed;
  m.pool = pool_from_string(ckpt.require_meta("pool"));
  m.use_context_in_attention = flag("use_context_in_attention");
  m.use_focal = flag("use_focal");
  m.canonical_reduction = flag("canonical_reduction");
  m.prediction = ckpt.require_network("prediction");
  m.theta = ckpt.require_network("theta");
  m.transform = ckpt.require_network("transform");
  m.attention = ckpt.require_network("attention");
  m.focal = ckpt.require_network("focal");
  m.validate();
  if (std::to_string(m.class_count()) != ckpt.require_meta("class_count")) {
    throw IoError("class_count metadata disagrees with the prediction network");
  }
  return m;
}

}  // namespace focatt
