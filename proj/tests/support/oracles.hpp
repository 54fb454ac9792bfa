#pragma once

// Independent reference implementations used only by tests. They share data
// structures with the library but none of its arithmetic: every loop is
// written out scalar by scalar.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "focatt/bagprep.hpp"
#include "focatt/hierarchy.hpp"
#include "focatt/model.hpp"
#include "focatt/nncore.hpp"

namespace oracle {

inline double activate(focatt::Activation act, double z) {
  switch (act) {
    case focatt::Activation::relu:
      return z > 0.0 ? z : 0.0;
    case focatt::Activation::sigmoid:
      return 1.0 / (1.0 + std::exp(-z));
    case focatt::Activation::softplus:
      return z > 30.0 ? z : std::log(1.0 + std::exp(z));
    default:
      return z;
  }
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  double top = -std::numeric_limits<double>::infinity();
  for (double v : z) top = std::max(top, v);
  std::vector<double> out(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - top);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

// Inference-mode forward pass, one multiply-add at a time.
inline std::vector<double> mlp_forward(const focatt::Mlp& net, std::vector<double> x) {
  for (const auto& layer : net.layers()) {
    std::vector<double> z(layer.out, 0.0);
    for (std::size_t o = 0; o < layer.out; ++o) {
      double acc = layer.bias[o];
      for (std::size_t i = 0; i < layer.in; ++i) acc += layer.weight[o * layer.in + i] * x[i];
      z[o] = acc;
    }
    if (layer.activation == focatt::Activation::softmax) {
      x = softmax(z);
    } else {
      for (double& v : z) v = activate(layer.activation, v);
      x = std::move(z);
    }
  }
  return x;
}

// y(j) = sum_i p_i(j)^gamma(j) a_i, normalised.
inline std::vector<double> aggregate(const std::vector<std::vector<double>>& p, const std::vector<double>& gamma,
                                     const std::vector<double>& a) {
  const std::size_t c = gamma.size();
  std::vector<double> y(c, 0.0);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double term = p[i][j] == 0.0 ? 0.0 : std::pow(p[i][j], gamma[j]);
      y[j] += term * a[i];
    }
  }
  double total = 0.0;
  for (double v : y) total += v;
  for (double& v : y) v /= total;
  return y;
}

// Plain attention MIL: y = sum_i a_i p_i / sum_j sum_i a_i p_i(j) with a_i
// computed from the instance alone. Matches the model with both flags off.
inline std::vector<double> simple_attention_mil(const focatt::FocAttModel& m, const focatt::Bag& bag) {
  const std::size_t c = m.class_count();
  std::vector<double> y(c, 0.0);
  for (const auto& x : bag.features) {
    const auto p = mlp_forward(m.prediction, x);
    const double a = mlp_forward(m.attention, mlp_forward(m.transform, x))[0];
    for (std::size_t j = 0; j < c; ++j) y[j] += a * p[j];
  }
  double total = 0.0;
  for (double v : y) total += v;
  for (double& v : y) v /= total;
  return y;
}

// P(diagnosis) = P(diagnosis | its site) P(site), from raw head logits.
inline std::vector<double> hier_marginal(const std::vector<double>& site_logits, const std::vector<double>& pd_logits,
                                         const focatt::HierarchyTable& table) {
  const auto p_site = softmax(site_logits);
  std::vector<double> out(pd_logits.size(), 0.0);
  for (std::size_t d = 0; d < pd_logits.size(); ++d) {
    const std::size_t s = table.site_of(d);
    double denom = 0.0;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < pd_logits.size(); ++e) {
      if (table.site_of(e) == s) top = std::max(top, pd_logits[e]);
    }
    for (std::size_t e = 0; e < pd_logits.size(); ++e) {
      if (table.site_of(e) == s) denom += std::exp(pd_logits[e] - top);
    }
    out[d] = std::exp(pd_logits[d] - top) / denom * p_site[s];
  }
  return out;
}

inline double sum_of_squares(const std::vector<std::vector<double>>& points, const std::vector<std::size_t>& assign,
                             std::size_t k) {
  const std::size_t d = points.front().size();
  std::vector<std::vector<double>> mean(k, std::vector<double>(d, 0.0));
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    ++count[assign[i]];
    for (std::size_t t = 0; t < d; ++t) mean[assign[i]][t] += points[i][t];
  }
  for (std::size_t c = 0; c < k; ++c) {
    for (auto& v : mean[c]) v /= static_cast<double>(std::max<std::size_t>(count[c], 1));
  }
  double ss = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = points[i][t] - mean[assign[i]][t];
      ss += diff * diff;
    }
  }
  return ss;
}

// Minimum within-cluster sum of squares over every partition into exactly k
// non-empty clusters. Exponential; meant for n <= 12, k <= 3.
inline double best_partition_ss(const std::vector<std::vector<double>>& points, std::size_t k) {
  const std::size_t n = points.size();
  std::vector<std::size_t> assign(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<bool> used(k, false);
    for (auto c : assign) used[c] = true;
    if (std::all_of(used.begin(), used.end(), [](bool u) { return u; })) {
      best = std::min(best, sum_of_squares(points, assign, k));
    }
    std::size_t i = 0;
    while (i < n && ++assign[i] == k) assign[i++] = 0;
    if (i == n) break;
  }
  return best;
}

// Share of (positive, negative) pairs ordered correctly, ties counted half.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 1) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

}  // namespace oracle
