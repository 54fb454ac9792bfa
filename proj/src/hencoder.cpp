#include "focatt/hencoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "focatt/error.hpp"

namespace focatt {

namespace {

Mlp make_head(std::size_t in, std::size_t hidden, std::size_t out, double dropout, Rng& rng) {
  if (hidden == 0) {
    const std::size_t widths[] = {in, out};
    return Mlp::make(widths, Activation::relu, Activation::identity, dropout, rng);
  }
  const std::size_t widths[] = {in, hidden, out};
  return Mlp::make(widths, Activation::relu, Activation::identity, dropout, rng);
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

HierEncoder HierEncoder::make(const HierarchyTable& table, const EncoderConfig& config, std::uint64_t seed) {
  if (table.diagnosis_count() == 0) throw ArgumentError("encoder needs a non-empty hierarchy");
  if (config.input_dim == 0 || config.hidden == 0 || config.embed_dim == 0) {
    throw ArgumentError("encoder dimensions must be positive");
  }
  Rng rng(seed);
  HierEncoder enc;
  enc.table = table;
  enc.seed = seed;
  const std::size_t trunk_widths[] = {config.input_dim, config.hidden, config.embed_dim};
  enc.trunk = Mlp::make(trunk_widths, Activation::relu, Activation::identity, config.dropout, rng);
  enc.site_head = make_head(config.embed_dim, config.head_hidden, table.site_count(), config.dropout, rng);
  enc.pd_head = make_head(config.embed_dim, config.head_hidden, table.diagnosis_count(), config.dropout, rng);
  return enc;
}

std::size_t HierEncoder::patch_side() const {
  const std::size_t pixels = input_dim() / 3;
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(pixels))));
  if (pixels * 3 != input_dim() || side * side != pixels) {
    throw ShapeError("encoder input is not a square RGB patch");
  }
  return side;
}

void HierEncoder::set_dropout_rate(double rate) {
  trunk.set_dropout_rate(rate);
  site_head.set_dropout_rate(rate);
  pd_head.set_dropout_rate(rate);
}

void HierEncoder::validate() const {
  trunk.validate();
  site_head.validate();
  pd_head.validate();
  if (site_head.input_dim() != trunk.output_dim() || pd_head.input_dim() != trunk.output_dim()) {
    throw ShapeError("encoder heads do not consume the trunk embedding");
  }
  if (site_head.output_dim() != table.site_count()) throw ShapeError("site head width differs from site count");
  if (pd_head.output_dim() != table.diagnosis_count()) {
    throw ShapeError("diagnosis head width differs from diagnosis count");
  }
}

HierOutput hier_probabilities(std::span<const double> site_logits, std::span<const double> pd_logits,
                              const HierarchyTable& table) {
  if (site_logits.size() != table.site_count()) throw ShapeError("site logits do not match the hierarchy");
  if (pd_logits.size() != table.diagnosis_count()) throw ShapeError("diagnosis logits do not match the hierarchy");
  HierOutput out;
  out.p_site = softmax(site_logits);
  out.p_pd_given_site.assign(table.diagnosis_count(), 0.0);
  out.p_pd_marginal.assign(table.diagnosis_count(), 0.0);
  for (std::size_t s = 0; s < table.site_count(); ++s) {
    const auto& group = table.group(s);
    std::vector<double> logits;
    logits.reserve(group.size());
    for (auto d : group) logits.push_back(pd_logits[d]);
    const auto conditional = softmax(logits);
    for (std::size_t k = 0; k < group.size(); ++k) {
      out.p_pd_given_site[group[k]] = conditional[k];
      out.p_pd_marginal[group[k]] = conditional[k] * out.p_site[s];
    }
  }
  return out;
}

HierOutput hier_forward(const HierEncoder& enc, std::span<const double> patch_input) {
  const auto embedding = mlp_infer(enc.trunk, patch_input);
  return hier_probabilities(mlp_infer(enc.site_head, embedding), mlp_infer(enc.pd_head, embedding), enc.table);
}

double hier_loss(const HierOutput& out, const HierarchicalLabel& label, const HierarchyTable& table,
                 const HierLossWeights& weights) {
  table.check(label);
  return weights.site * cross_entropy(out.p_site, static_cast<std::size_t>(label.site)) +
         weights.diagnosis * cross_entropy(out.p_pd_marginal, static_cast<std::size_t>(label.diagnosis));
}

HierGrads::HierGrads(const HierEncoder& enc) : trunk(enc.trunk), site_head(enc.site_head), pd_head(enc.pd_head) {}

void HierGrads::zero() {
  trunk.zero();
  site_head.zero();
  pd_head.zero();
}

void HierGrads::scale(double f) {
  trunk.scale(f);
  site_head.scale(f);
  pd_head.scale(f);
}

HierStepResult hier_loss_and_grads(const HierEncoder& enc, std::span<const double> patch_input,
                                   const HierarchicalLabel& label, HierGrads& grads, Mode mode, Rng* rng,
                                   const HierLossWeights& weights) {
  const auto& table = enc.table;
  table.check(label);
  auto trunk_fw = mlp_forward(enc.trunk, patch_input, mode, rng);
  auto site_fw = mlp_forward(enc.site_head, trunk_fw.output, mode, rng);
  auto pd_fw = mlp_forward(enc.pd_head, trunk_fw.output, mode, rng);

  HierStepResult res;
  res.output = hier_probabilities(site_fw.output, pd_fw.output, table);
  res.loss = hier_loss(res.output, label, table, weights);

  const auto site = static_cast<std::size_t>(label.site);
  const auto diag = static_cast<std::size_t>(label.diagnosis);
  const auto& ps = res.output.p_site;
  const auto& pc = res.output.p_pd_given_site;
  const double marginal = res.output.p_pd_marginal[diag];

  // d loss / d probabilities
  std::vector<double> g_site(table.site_count(), 0.0);
  std::vector<double> g_cond(table.diagnosis_count(), 0.0);
  g_site[site] -= weights.site / (ps[site] + kLogEpsilon);
  const double g_marginal = -weights.diagnosis / (marginal + kLogEpsilon);
  g_site[site] += g_marginal * pc[diag];
  g_cond[diag] += g_marginal * ps[site];

  // ... then through the (grouped) softmaxes to logits
  const auto g_site_logits = softmax_backward(ps, g_site);
  std::vector<double> g_pd_logits(table.diagnosis_count(), 0.0);
  for (std::size_t s = 0; s < table.site_count(); ++s) {
    const auto& group = table.group(s);
    std::vector<double> probs, up;
    for (auto d : group) {
      probs.push_back(pc[d]);
      up.push_back(g_cond[d]);
    }
    const auto g = softmax_backward(probs, up);
    for (std::size_t k = 0; k < group.size(); ++k) g_pd_logits[group[k]] = g[k];
  }

  auto g_embed = mlp_backward_accumulate(enc.site_head, site_fw.cache, g_site_logits, grads.site_head);
  const auto g_embed_pd = mlp_backward_accumulate(enc.pd_head, pd_fw.cache, g_pd_logits, grads.pd_head);
  for (std::size_t i = 0; i < g_embed.size(); ++i) g_embed[i] += g_embed_pd[i];
  mlp_backward_accumulate(enc.trunk, trunk_fw.cache, g_embed, grads.trunk);
  return res;
}

std::vector<double> encode(const HierEncoder& enc, std::span<const double> patch_input) {
  return mlp_infer(enc.trunk, patch_input);
}

PatchEncoder patch_encoder(const HierEncoder& enc) {
  const std::size_t side = enc.patch_side();
  return [&enc, side](const Patch& p) { return encode(enc, patch_to_input(resize_patch(p, side))); };
}

double diagnosis_accuracy(const HierEncoder& enc, std::span<const LabeledInput> data) {
  if (data.empty()) throw ArgumentError("accuracy of an empty dataset");
  std::size_t hits = 0;
  for (const auto& item : data) {
    const auto out = hier_forward(enc, item.input);
    if (argmax(out.p_pd_marginal) == static_cast<std::size_t>(item.label.diagnosis)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

FineTuneResult fine_tune(HierEncoder& enc, std::span<const LabeledInput> data, const FineTuneConfig& config) {
  if (data.empty()) throw ArgumentError("fine-tuning needs a non-empty dataset");
  if (config.batch == 0 || config.epochs == 0) throw ArgumentError("batch and epochs must be positive");
  for (const auto& item : data) {
    enc.table.check(item.label);
    if (item.input.size() != enc.input_dim()) throw ShapeError("fine-tune input does not match the encoder");
  }

  Rng rng(config.seed);
  auto state = OptimizerState::adam(config.learning_rate, config.weight_decay);
  HierGrads grads(enc);
  auto params = enc.params();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  FineTuneResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t end = std::min(order.size(), start + config.batch);
      grads.zero();
      for (std::size_t k = start; k < end; ++k) {
        const auto& item = data[order[k]];
        total += hier_loss_and_grads(enc, item.input, item.label, grads, Mode::train, &rng, config.weights).loss;
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      const auto gv = grads.as_vector();
      optimizer_step(state, params, gv);
    }
    result.loss_history.push_back(total / static_cast<double>(data.size()));
    result.accuracy_history.push_back(diagnosis_accuracy(enc, data));
  }
  return result;
}

Checkpoint encoder_checkpoint(const HierEncoder& enc) {
  enc.validate();
  Checkpoint ckpt;
  ckpt.seed = enc.seed;
  ckpt.meta = {{"kind", "hencoder"}, {"hierarchy", enc.table.serialize()}};
  ckpt.networks = {{"trunk", enc.trunk}, {"site_head", enc.site_head}, {"pd_head", enc.pd_head}};
  return ckpt;
}

HierEncoder encoder_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.require_meta("kind") != "hencoder") throw IoError("checkpoint does not hold a hierarchical encoder");
  HierEncoder enc;
  enc.seed = ckpt.seed;
  enc.table = HierarchyTable::parse(ckpt.require_meta("hierarchy"));
  enc.trunk = ckpt.require_network("trunk");
  enc.site_head = ckpt.require_network("site_head");
  enc.pd_head = ckpt.require_network("pd_head");
  enc.validate();
  return enc;
}

}  // namespace focatt
