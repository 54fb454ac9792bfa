#include "focatt/synthgen.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

#include "focatt/error.hpp"
#include "focatt/image_io.hpp"
#include "focatt/rng.hpp"

namespace focatt {

namespace {

constexpr std::uint64_t kBagStream = 0x62616773;
constexpr std::uint64_t kOracleStream = 0x6f7261636c65;
constexpr std::uint64_t kSlideStream = 0x736c69646573;
constexpr std::uint64_t kPatchStream = 0x706174636873;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a combined word
  std::uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ArgumentError("spec key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ArgumentError("spec key '" + key + "' expects a real number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ArgumentError("spec key '" + key + "' expects true or false, got '" + v + "'");
}

// Orthonormal directions while count <= dim, plain unit vectors beyond.
std::vector<std::vector<double>> random_directions(std::size_t count, std::size_t dim, Rng& rng) {
  std::vector<std::vector<double>> dirs;
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<double> v(dim);
    double norm = 0.0;
    do {
      for (double& x : v) x = rng.normal();
      if (k < dim) {
        for (const auto& u : dirs) {
          const double dot = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
          for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * u[i];
        }
      }
      norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    } while (norm < 1e-6);
    for (double& x : v) x /= norm;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

struct Planted {
  std::size_t classes = 0;
  std::vector<std::vector<double>> signature;  // plain: one per diagnosis
  std::vector<std::vector<double>> a_sig, b_sig, marker;  // coupled
};

Planted make_planted(const SynthSpec& spec) {
  Rng rng(spec.seed);
  Planted p;
  p.classes = spec.diagnosis_count();
  const std::size_t d = spec.feature_dim;
  if (!spec.context_coupled) {
    auto dirs = random_directions(spec.site_count() + p.classes, d, rng);
    std::size_t dx = 0;
    for (std::size_t s = 0; s < spec.site_count(); ++s) {
      for (std::size_t k = 0; k < spec.diagnoses_per_site[s]; ++k, ++dx) {
        std::vector<double> sig(d);
        for (std::size_t i = 0; i < d; ++i) {
          sig[i] = spec.site_scale * dirs[s][i] + spec.diagnosis_scale * dirs[spec.site_count() + dx][i];
        }
        p.signature.push_back(std::move(sig));
      }
    }
  } else {
    const double scale = std::hypot(spec.site_scale, spec.diagnosis_scale);
    auto dirs = random_directions(2 * p.classes + 2, d, rng);
    for (auto& v : dirs) {
      for (double& x : v) x *= scale;
    }
    p.a_sig.assign(dirs.begin(), dirs.begin() + static_cast<std::ptrdiff_t>(p.classes));
    p.b_sig.assign(dirs.begin() + static_cast<std::ptrdiff_t>(p.classes),
                   dirs.begin() + static_cast<std::ptrdiff_t>(2 * p.classes));
    p.marker.assign(dirs.end() - 2, dirs.end());
  }
  return p;
}

std::vector<double> noisy(const std::vector<double>& mean, double sigma, Rng& rng) {
  std::vector<double> x(mean);
  for (double& v : x) v += sigma * rng.normal();
  return x;
}

std::size_t key_count(const SynthSpec& spec, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::lround(spec.key_fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

struct SampledBag {
  std::vector<std::vector<double>> features;
  std::vector<std::uint8_t> keys;
};

SampledBag sample_bag(const SynthSpec& spec, const Planted& planted, std::size_t label, Rng& rng) {
  const std::size_t n = spec.instances_min + rng.below(spec.instances_max - spec.instances_min + 1);
  const std::vector<double> zero(spec.feature_dim, 0.0);
  std::vector<std::size_t> slots(n);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(slots));

  // mean of every slot; background instances stay at the origin
  std::vector<const std::vector<double>*> means(n, &zero);
  SampledBag out;
  out.keys.assign(n, 0);
  if (!spec.context_coupled) {
    const std::size_t k = key_count(spec, n);
    for (std::size_t j = 0; j < k; ++j) {
      means[slots[j]] = &planted.signature[label];
      out.keys[slots[j]] = 1;
    }
  } else {
    const std::size_t m = rng.uniform() < spec.marker_bias ? 0 : 1;
    const std::size_t other = rng.below(planted.classes);
    const std::size_t ca = m == 0 ? label : other;
    const std::size_t cb = m == 0 ? other : label;
    const std::size_t k = std::min(key_count(spec, n), (n - 1) / 2);
    for (std::size_t j = 0; j < n; ++j) {
      if (j < k) {
        means[slots[j]] = &planted.a_sig[ca];
        out.keys[slots[j]] = m == 0;
      } else if (j < 2 * k) {
        means[slots[j]] = &planted.b_sig[cb];
        out.keys[slots[j]] = m == 1;
      } else {
        means[slots[j]] = &planted.marker[m];
      }
    }
  }
  out.features.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.features.push_back(noisy(*means[i], spec.noise_sigma, rng));
  return out;
}

// log of the elementary symmetric polynomial e_k(exp(l_1), ..., exp(l_n)) up to
// an additive constant shared by every call with the same `shift`
double log_esym(const std::vector<double>& l, std::size_t k, double shift) {
  std::vector<long double> e(k + 1, 0.0L);
  e[0] = 1.0L;
  for (double li : l) {
    const long double r = std::exp(static_cast<long double>(li - shift));
    for (std::size_t j = std::min(k, l.size()); j >= 1; --j) e[j] += e[j - 1] * r;
  }
  return e[k] > 0.0L ? static_cast<double>(std::log(e[k])) : -INFINITY;
}

std::size_t bayes_plain(const SynthSpec& spec, const Planted& planted, const std::vector<std::vector<double>>& x) {
  const double s2 = spec.noise_sigma * spec.noise_sigma;
  const std::size_t k = key_count(spec, x.size());
  std::vector<std::vector<double>> ll(planted.classes, std::vector<double>(x.size()));
  double shift = -INFINITY;
  for (std::size_t c = 0; c < planted.classes; ++c) {
    const auto& s = planted.signature[c];
    const double ss = std::inner_product(s.begin(), s.end(), s.begin(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double xs = std::inner_product(x[i].begin(), x[i].end(), s.begin(), 0.0);
      ll[c][i] = (2.0 * xs - ss) / (2.0 * s2);  // log N(x; s, s2) - log N(x; 0, s2)
      shift = std::max(shift, ll[c][i]);
    }
  }
  std::size_t best = 0;
  double best_v = -INFINITY;
  for (std::size_t c = 0; c < planted.classes; ++c) {
    const double v = log_esym(ll[c], k, shift);
    if (v > best_v) {
      best_v = v;
      best = c;
    }
  }
  return best;
}

std::size_t planted_rule_coupled(const Planted& planted, const std::vector<std::vector<double>>& x) {
  // type every instance by its nearest mean (background is the origin)
  const std::size_t c = planted.classes;
  auto nearest = [&](const std::vector<double>& v) -> std::pair<int, std::size_t> {
    double best = std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
    std::pair<int, std::size_t> kind{-1, 0};
    auto consider = [&](const std::vector<double>& mean, int type, std::size_t idx) {
      double dd = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) dd += (v[i] - mean[i]) * (v[i] - mean[i]);
      if (dd < best) {
        best = dd;
        kind = {type, idx};
      }
    };
    for (std::size_t m = 0; m < 2; ++m) consider(planted.marker[m], 0, m);
    for (std::size_t j = 0; j < c; ++j) consider(planted.a_sig[j], 1, j);
    for (std::size_t j = 0; j < c; ++j) consider(planted.b_sig[j], 2, j);
    return kind;
  };
  std::size_t votes[2] = {0, 0};
  int a = -1, b = -1;
  for (const auto& v : x) {
    const auto [type, idx] = nearest(v);
    if (type == 0) ++votes[idx];
    if (type == 1 && a < 0) a = static_cast<int>(idx);
    if (type == 2 && b < 0) b = static_cast<int>(idx);
  }
  const int marker = votes[1] > votes[0] ? 1 : 0;
  const int pick = marker == 1 ? b : a;
  return pick < 0 ? 0 : static_cast<std::size_t>(pick);
}

// HSV in [0,1]^3 to 8-bit RGB
std::array<int, 3> hsv_rgb(double h, double s, double v) {
  h = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  return {static_cast<int>(std::lround(255 * r)), static_cast<int>(std::lround(255 * g)),
          static_cast<int>(std::lround(255 * b))};
}

std::uint8_t clamp_byte(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

}  // namespace

std::size_t SynthSpec::diagnosis_count() const {
  return std::accumulate(diagnoses_per_site.begin(), diagnoses_per_site.end(), std::size_t{0});
}

void SynthSpec::validate() const {
  if (diagnoses_per_site.empty()) throw ArgumentError("spec needs at least one site");
  for (auto n : diagnoses_per_site) {
    if (n == 0) throw ArgumentError("every site needs at least one diagnosis");
  }
  if (diagnosis_count() < 2) throw ArgumentError("spec needs at least two diagnoses in total");
  if (bags_per_diagnosis == 0) throw ArgumentError("bags_per_diagnosis must be >= 1");
  if (instances_min == 0 || instances_max < instances_min) {
    throw ArgumentError("instance range must satisfy 1 <= instances_min <= instances_max");
  }
  if (feature_dim == 0) throw ArgumentError("feature_dim must be >= 1");
  if (!(key_fraction > 0.0 && key_fraction <= 1.0)) throw ArgumentError("key_fraction must lie in (0, 1]");
  if (!(noise_sigma >= 0.0)) throw ArgumentError("noise_sigma must be >= 0");
  if (!(site_scale >= 0.0) || !(diagnosis_scale > 0.0)) throw ArgumentError("signature scales must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ArgumentError("test_fraction must lie in [0, 1)");
  if (!(marker_bias >= 0.0 && marker_bias <= 1.0)) throw ArgumentError("marker_bias must lie in [0, 1]");
  if (context_coupled && instances_min < 3) throw ArgumentError("context-coupled bags need instances_min >= 3");
  if (patch_side < 4 || grid_rows == 0 || grid_cols == 0) throw ArgumentError("slide geometry out of range");
}

SynthSpec SynthSpec::parse(std::string_view text) {
  SynthSpec spec;
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters = {
      {"diagnoses_per_site",
       [&](const std::string& k, const std::string& v) {
         spec.diagnoses_per_site.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) spec.diagnoses_per_site.push_back(parse_uint(k, trim(item)));
       }},
      {"bags_per_diagnosis", [&](auto& k, auto& v) { spec.bags_per_diagnosis = parse_uint(k, v); }},
      {"instances_min", [&](auto& k, auto& v) { spec.instances_min = parse_uint(k, v); }},
      {"instances_max", [&](auto& k, auto& v) { spec.instances_max = parse_uint(k, v); }},
      {"feature_dim", [&](auto& k, auto& v) { spec.feature_dim = parse_uint(k, v); }},
      {"key_fraction", [&](auto& k, auto& v) { spec.key_fraction = parse_real(k, v); }},
      {"noise_sigma", [&](auto& k, auto& v) { spec.noise_sigma = parse_real(k, v); }},
      {"site_scale", [&](auto& k, auto& v) { spec.site_scale = parse_real(k, v); }},
      {"diagnosis_scale", [&](auto& k, auto& v) { spec.diagnosis_scale = parse_real(k, v); }},
      {"context_coupled", [&](auto& k, auto& v) { spec.context_coupled = parse_bool(k, v); }},
      {"marker_bias", [&](auto& k, auto& v) { spec.marker_bias = parse_real(k, v); }},
      {"test_fraction", [&](auto& k, auto& v) { spec.test_fraction = parse_real(k, v); }},
      {"seed", [&](auto& k, auto& v) { spec.seed = parse_uint(k, v); }},
      {"slides_per_diagnosis", [&](auto& k, auto& v) { spec.slides_per_diagnosis = parse_uint(k, v); }},
      {"grid_rows", [&](auto& k, auto& v) { spec.grid_rows = parse_uint(k, v); }},
      {"grid_cols", [&](auto& k, auto& v) { spec.grid_cols = parse_uint(k, v); }},
      {"patch_side", [&](auto& k, auto& v) { spec.patch_side = parse_uint(k, v); }},
      {"patches_per_diagnosis", [&](auto& k, auto& v) { spec.patches_per_diagnosis = parse_uint(k, v); }},
  };
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ArgumentError("spec line " + std::to_string(line_no) + " is not key = value: '" + t + "'");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ArgumentError("unknown spec key '" + key + "'");
    it->second(key, value);
  }
  spec.validate();
  return spec;
}

SynthSpec SynthSpec::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read spec file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string SynthSpec::serialize() const {
  std::ostringstream out;
  out << "diagnoses_per_site = ";
  for (std::size_t i = 0; i < diagnoses_per_site.size(); ++i) out << (i ? "," : "") << diagnoses_per_site[i];
  out << "\nbags_per_diagnosis = " << bags_per_diagnosis << "\ninstances_min = " << instances_min
      << "\ninstances_max = " << instances_max << "\nfeature_dim = " << feature_dim
      << "\nkey_fraction = " << format_double(key_fraction) << "\nnoise_sigma = " << format_double(noise_sigma)
      << "\nsite_scale = " << format_double(site_scale) << "\ndiagnosis_scale = " << format_double(diagnosis_scale)
      << "\ncontext_coupled = " << (context_coupled ? "true" : "false")
      << "\nmarker_bias = " << format_double(marker_bias)
      << "\ntest_fraction = " << format_double(test_fraction) << "\nseed = " << seed
      << "\nslides_per_diagnosis = " << slides_per_diagnosis << "\ngrid_rows = " << grid_rows
      << "\ngrid_cols = " << grid_cols << "\npatch_side = " << patch_side
      << "\npatches_per_diagnosis = " << patches_per_diagnosis << '\n';
  return out.str();
}

HierarchyTable synth_hierarchy(const SynthSpec& spec) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t s = 0; s < spec.site_count(); ++s) {
    for (std::size_t k = 0; k < spec.diagnoses_per_site[s]; ++k) {
      pairs.emplace_back("site" + std::to_string(s) + "_dx" + std::to_string(k), "site" + std::to_string(s));
    }
  }
  return HierarchyTable(pairs);
}

SynthBags generate_bags(const SynthSpec& spec) {
  spec.validate();
  const Planted planted = make_planted(spec);
  SynthBags data;
  data.table = synth_hierarchy(spec);
  Rng rng(mix(spec.seed, kBagStream));

  const std::size_t per = spec.bags_per_diagnosis;
  std::size_t next_id = 0;
  for (std::size_t d = 0; d < planted.classes; ++d) {
    std::vector<Bag> bags;
    std::vector<std::vector<std::uint8_t>> keys;
    for (std::size_t j = 0; j < per; ++j) {
      auto sample = sample_bag(spec, planted, d, rng);
      char id[32];
      std::snprintf(id, sizeof id, "bag%05zu", next_id++);
      Bag bag;
      bag.slide_id = id;
      bag.features = std::move(sample.features);
      bag.label = data.table.label_for(d);
      // lay instances out on a near-square grid so heat maps can be drawn
      const auto width = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(bag.size()))));
      for (std::size_t i = 0; i < bag.size(); ++i) {
        bag.coords.push_back({static_cast<std::int32_t>(i / width), static_cast<std::int32_t>(i % width)});
      }
      bags.push_back(std::move(bag));
      keys.push_back(std::move(sample.keys));
    }
    auto take = static_cast<std::size_t>(std::lround(spec.test_fraction * static_cast<double>(per)));
    if (spec.test_fraction > 0.0 && per >= 2) take = std::clamp<std::size_t>(take, 1, per - 1);
    if (per < 2) take = 0;
    std::vector<std::size_t> idx(per);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(idx));
    std::vector<bool> is_test(per, false);
    for (std::size_t t = 0; t < take; ++t) is_test[idx[t]] = true;
    for (std::size_t j = 0; j < per; ++j) {
      (is_test[j] ? data.test : data.train).push_back(std::move(bags[j]));
      (is_test[j] ? data.test_keys : data.train_keys).push_back(std::move(keys[j]));
    }
  }
  data.oracle_accuracy = oracle_accuracy(spec);
  return data;
}

double oracle_accuracy(const SynthSpec& spec, std::size_t samples) {
  spec.validate();
  if (samples == 0) throw ArgumentError("oracle needs at least one sample");
  if (!spec.context_coupled && spec.noise_sigma == 0.0) return 1.0;
  const Planted planted = make_planted(spec);
  Rng rng(mix(spec.seed, kOracleStream));
  std::size_t hits = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t label = rng.below(planted.classes);
    const auto bag = sample_bag(spec, planted, label, rng);
    const std::size_t guess =
        spec.context_coupled ? planted_rule_coupled(planted, bag.features) : bayes_plain(spec, planted, bag.features);
    hits += guess == label;
  }
  return static_cast<double>(hits) / static_cast<double>(samples);
}

std::size_t texture_count(const SynthSpec& spec) { return spec.diagnosis_count() + 2; }

Patch texture_patch(const SynthSpec& spec, std::int32_t texture, std::uint64_t variant, GridCoord grid) {
  const auto n_diag = static_cast<std::int32_t>(spec.diagnosis_count());
  if (texture < 0 || texture >= n_diag + 2) throw ArgumentError("texture id out of range");
  std::array<int, 3> base;
  int period = 0;
  if (texture < n_diag) {
    base = hsv_rgb(0.05 + 0.618034 * texture, 0.65, 0.62);
    period = 3 + texture % 3;
  } else if (texture == n_diag) {
    base = {205, 150, 185};  // pale stroma
    period = 7;
  } else {
    base = {170, 120, 150};
    period = 9;
  }
  Rng rng(mix(mix(spec.seed, kPatchStream), mix(static_cast<std::uint64_t>(texture), variant)));
  const std::size_t side = spec.patch_side;
  std::vector<std::uint8_t> px(side * side * 3);
  for (std::size_t r = 0; r < side; ++r) {
    const int band = (r % static_cast<std::size_t>(period) == 0) ? -35 : 0;
    for (std::size_t c = 0; c < side; ++c) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const int noise = static_cast<int>(rng.below(21)) - 10;
        px[(r * side + c) * 3 + ch] = clamp_byte(base[ch] + band + noise);
      }
    }
  }
  return make_patch(side, std::move(px), grid);
}

Patch background_patch(std::size_t side, std::uint64_t variant, GridCoord grid) {
  Rng rng(mix(kSlideStream, variant));
  std::vector<std::uint8_t> px(side * side * 3);
  for (auto& v : px) v = static_cast<std::uint8_t>(243 + rng.below(9));
  return make_patch(side, std::move(px), grid);
}

std::vector<SynthSlide> generate_slides(const SynthSpec& spec) {
  spec.validate();
  const auto table = synth_hierarchy(spec);
  Rng rng(mix(spec.seed, kSlideStream));
  std::vector<SynthSlide> slides;
  std::uint64_t variant = 0;
  std::size_t index = 0;
  const auto rows = static_cast<double>(spec.grid_rows);
  const auto cols = static_cast<double>(spec.grid_cols);
  for (std::size_t d = 0; d < spec.diagnosis_count(); ++d) {
    for (std::size_t j = 0; j < spec.slides_per_diagnosis; ++j) {
      SynthSlide slide;
      char id[32];
      std::snprintf(id, sizeof id, "slide%04zu", index++);
      slide.slide_id = id;
      slide.label = table.label_for(d);
      // tissue ellipse around a jittered centre; the centre cell is always tissue
      const double cr = rows / 2.0 + rng.uniform(-0.1, 0.1) * rows;
      const double cc = cols / 2.0 + rng.uniform(-0.1, 0.1) * cols;
      const double rr = rng.uniform(0.25, 0.45) * rows;
      const double rc = rng.uniform(0.25, 0.45) * cols;
      std::vector<std::size_t> tissue_cells;
      const std::size_t n = spec.grid_rows * spec.grid_cols;
      slide.tissue.assign(n, 0);
      slide.texture.assign(n, -1);
      for (std::size_t r = 0; r < spec.grid_rows; ++r) {
        for (std::size_t c = 0; c < spec.grid_cols; ++c) {
          const double dr = (static_cast<double>(r) + 0.5 - cr) / rr;
          const double dc = (static_cast<double>(c) + 0.5 - cc) / rc;
          const bool centre = r == static_cast<std::size_t>(cr) && c == static_cast<std::size_t>(cc);
          if (dr * dr + dc * dc <= 1.0 || centre) tissue_cells.push_back(r * spec.grid_cols + c);
        }
      }
      rng.shuffle(std::span<std::size_t>(tissue_cells));
      const std::size_t keys = key_count(spec, tissue_cells.size());
      for (std::size_t t = 0; t < tissue_cells.size(); ++t) {
        const auto cell = tissue_cells[t];
        slide.tissue[cell] = 1;
        slide.texture[cell] = t < keys ? static_cast<std::int32_t>(d)
                                       : static_cast<std::int32_t>(spec.diagnosis_count() + rng.below(2));
      }
      for (std::size_t cell = 0; cell < n; ++cell) {
        const GridCoord g{static_cast<std::int32_t>(cell / spec.grid_cols),
                          static_cast<std::int32_t>(cell % spec.grid_cols)};
        Patch p = slide.tissue[cell] ? texture_patch(spec, slide.texture[cell], variant++, g)
                                     : background_patch(spec.patch_side, mix(spec.seed, variant++), g);
        p.slide_id = slide.slide_id;
        slide.patches.push_back(std::move(p));
      }
      slides.push_back(std::move(slide));
    }
  }
  return slides;
}

std::vector<LabeledPatch> generate_labeled_patches(const SynthSpec& spec) {
  spec.validate();
  const auto table = synth_hierarchy(spec);
  std::vector<LabeledPatch> out;
  for (std::size_t d = 0; d < spec.diagnosis_count(); ++d) {
    for (std::size_t j = 0; j < spec.patches_per_diagnosis; ++j) {
      out.push_back({texture_patch(spec, static_cast<std::int32_t>(d), (std::uint64_t{1} << 40) + d * 1000003 + j),
                     table.label_for(d)});
    }
  }
  Rng rng(mix(spec.seed, kPatchStream));
  rng.shuffle(std::span<LabeledPatch>(out));
  return out;
}

namespace {

Image patch_image(const Patch& p) {
  Image img;
  img.width = img.height = p.side;
  img.channels = 3;
  img.pixels = p.pixels;
  return img;
}

std::ofstream open_text(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

void write_slides(const std::filesystem::path& dir, const std::vector<SynthSlide>& slides,
                  const HierarchyTable& table) {
  std::filesystem::create_directories(dir);
  auto labels = open_text(dir / "labels.tsv");
  auto truth = open_text(dir / "truth.tsv");
  truth << "slide_id\trow\tcol\ttissue\ttexture\n";
  for (const auto& slide : slides) {
    write_slide_dir(dir / slide.slide_id, slide.patches);
    labels << slide.slide_id << '\t' << table.diagnoses()[static_cast<std::size_t>(slide.label.diagnosis)] << '\n';
    for (std::size_t i = 0; i < slide.patches.size(); ++i) {
      const auto& g = slide.patches[i].grid;
      truth << slide.slide_id << '\t' << g.row << '\t' << g.col << '\t' << int(slide.tissue[i]) << '\t'
            << slide.texture[i] << '\n';
    }
  }
  if (!labels || !truth) throw IoError("failed writing slide metadata in " + dir.string());
}

void write_labeled_patches(const std::filesystem::path& dir, const std::vector<LabeledPatch>& patches,
                           const HierarchyTable& table) {
  std::filesystem::create_directories(dir);
  auto labels = open_text(dir / "labels.tsv");
  for (std::size_t i = 0; i < patches.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "p%05zu.ppm", i);
    write_ppm(dir / name, patch_image(patches[i].patch));
    labels << name << '\t' << table.diagnoses()[static_cast<std::size_t>(patches[i].label.diagnosis)] << '\n';
  }
  if (!labels) throw IoError("failed writing " + (dir / "labels.tsv").string());
}

std::vector<LabeledPatch> read_labeled_patches(const std::filesystem::path& dir, const HierarchyTable& table) {
  std::ifstream in(dir / "labels.tsv", std::ios::binary);
  if (!in) throw IoError("cannot read " + (dir / "labels.tsv").string());
  std::vector<LabeledPatch> out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw IoError("malformed patch label line: '" + line + "'");
    const auto img = read_rgb_image(dir / line.substr(0, tab));
    if (img.width != img.height || img.channels != 3) throw IoError("patch " + line.substr(0, tab) + " is not square RGB");
    out.push_back({make_patch(img.width, img.pixels), table.label_for(trim(line.substr(tab + 1)))});
  }
  if (out.empty()) throw ArgumentError("no labeled patches in " + dir.string());
  return out;
}

void write_bags(const std::filesystem::path& dir, const SynthBags& data) {
  std::filesystem::create_directories(dir / "train");
  std::filesystem::create_directories(dir / "test");
  data.table.write(dir / "hierarchy.tsv");
  auto keys = open_text(dir / "keys.tsv");
  keys << "split\tslide_id\tinstance\n";
  auto emit = [&](const char* split, const std::vector<Bag>& bags, const std::vector<std::vector<std::uint8_t>>& k) {
    for (std::size_t b = 0; b < bags.size(); ++b) {
      write_bag(dir / split / (bags[b].slide_id + ".bag"), bags[b]);
      for (std::size_t i = 0; i < k[b].size(); ++i) {
        if (k[b][i]) keys << split << '\t' << bags[b].slide_id << '\t' << i << '\n';
      }
    }
  };
  emit("train", data.train, data.train_keys);
  emit("test", data.test, data.test_keys);
  if (!keys) throw IoError("failed writing " + (dir / "keys.tsv").string());
}

}  // namespace focatt
