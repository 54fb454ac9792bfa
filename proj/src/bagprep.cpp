#include "focatt/bagprep.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <regex>

#include "focatt/binary_io.hpp"
#include "focatt/error.hpp"
#include "focatt/image_io.hpp"
#include "focatt/rng.hpp"

namespace focatt {

void Patch::validate() const {
  if (side == 0 || pixels.empty()) throw ShapeError("empty patch");
  if (pixels.size() != side * side * 3) throw ShapeError("patch pixel count does not match side*side*3");
}

Patch make_patch(std::size_t side, std::vector<std::uint8_t> pixels, GridCoord grid, std::string slide_id) {
  Patch p{side, std::move(pixels), grid, std::move(slide_id)};
  p.validate();
  return p;
}

Patch resize_patch(const Patch& patch, std::size_t side) {
  patch.validate();
  if (side == 0) throw ArgumentError("resize target side must be positive");
  if (side == patch.side) return patch;
  Patch out{side, std::vector<std::uint8_t>(side * side * 3), patch.grid, patch.slide_id};
  const std::size_t src = patch.side;
  for (std::size_t r = 0; r < side; ++r) {
    const std::size_t r0 = r * src / side;
    const std::size_t r1 = std::max(r0 + 1, (r + 1) * src / side);
    for (std::size_t c = 0; c < side; ++c) {
      const std::size_t c0 = c * src / side;
      const std::size_t c1 = std::max(c0 + 1, (c + 1) * src / side);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        std::uint64_t sum = 0;
        for (std::size_t y = r0; y < r1; ++y) {
          for (std::size_t x = c0; x < c1; ++x) sum += patch.at(y, x, ch);
        }
        const std::uint64_t count = (r1 - r0) * (c1 - c0);
        out.pixels[(r * side + c) * 3 + ch] = static_cast<std::uint8_t>((sum + count / 2) / count);
      }
    }
  }
  return out;
}

std::vector<double> patch_to_input(const Patch& patch) {
  patch.validate();
  std::vector<double> v(patch.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = patch.pixels[i] / 255.0;
  return v;
}

TissueResult tissue_mask(const Patch& patch, double threshold) {
  patch.validate();
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ArgumentError("tissue threshold must lie in [0, 1]");
  std::size_t tissue = 0;
  const std::size_t count = patch.side * patch.side;
  for (std::size_t i = 0; i < count; ++i) {
    const int r = patch.pixels[3 * i];
    const int g = patch.pixels[3 * i + 1];
    const int b = patch.pixels[3 * i + 2];
    const double brightness = (r + g + b) / (3.0 * 255.0);
    const double saturation = (std::max({r, g, b}) - std::min({r, g, b})) / 255.0;
    if (brightness < kTissueMaxBrightness && saturation > kTissueMinSaturation) ++tissue;
  }
  TissueResult res;
  res.tissue_ratio = static_cast<double>(tissue) / static_cast<double>(count);
  res.is_tissue = res.tissue_ratio >= threshold;
  return res;
}

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::vector<std::vector<double>> cluster_means(std::span<const std::vector<double>> points,
                                               std::span<const std::size_t> assignments, std::size_t k) {
  const std::size_t dim = points.front().size();
  std::vector<std::vector<double>> centers(k, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto& c = centers[assignments[i]];
    for (std::size_t j = 0; j < dim; ++j) c[j] += points[i][j];
    ++counts[assignments[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    for (double& v : centers[c]) v /= static_cast<double>(counts[c]);
  }
  return centers;
}

double inertia_of(std::span<const std::vector<double>> points, std::span<const std::size_t> assignments,
                  const std::vector<std::vector<double>>& centers) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) s += squared_distance(points[i], centers[assignments[i]]);
  return s;
}

// Single-point moves that strictly lower the inertia, repeated until none is
// left. Lloyd fixed points are not always stable under such moves.
void hartigan_refine(std::span<const std::vector<double>> points, std::size_t k, KMeansResult& res) {
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t a : res.assignments) ++counts[a];
  for (bool moved = true; moved;) {
    moved = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const std::size_t from = res.assignments[i];
      if (counts[from] < 2) continue;
      const double nf = static_cast<double>(counts[from]);
      const double removal = nf / (nf - 1.0) * squared_distance(points[i], res.centers[from]);
      std::size_t to = from;
      double best_gain = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        if (c == from) continue;
        const double nt = static_cast<double>(counts[c]);
        const double gain = removal - nt / (nt + 1.0) * squared_distance(points[i], res.centers[c]);
        if (gain > best_gain) {
          best_gain = gain;
          to = c;
        }
      }
      // relative margin keeps rounding from cycling between equal partitions
      if (to == from || best_gain <= 1e-12 * (1.0 + res.inertia)) continue;
      res.assignments[i] = to;
      --counts[from];
      ++counts[to];
      res.centers = cluster_means(points, res.assignments, k);
      const double inertia = inertia_of(points, res.assignments, res.centers);
      if (inertia >= res.inertia) {
        // rounding disagreed with the move; undo it
        res.assignments[i] = from;
        ++counts[from];
        --counts[to];
        res.centers = cluster_means(points, res.assignments, k);
        continue;
      }
      res.inertia = inertia;
      res.inertia_history.push_back(inertia);
      moved = true;
    }
  }
}

KMeansResult lloyd(std::span<const std::vector<double>> points, std::size_t k, Rng& rng, std::size_t max_iter) {
  const std::size_t n = points.size();
  KMeansResult res;
  res.centers.reserve(k);
  // k-means++ seeding: each new center is drawn with probability proportional
  // to its squared distance from the nearest center chosen so far.
  res.centers.push_back(points[rng.below(n)]);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (res.centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(points[i], res.centers.back()));
      total += nearest[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < n && pick == n; ++i) {
        if (nearest[i] > 0.0 && (u -= nearest[i]) < 0.0) pick = i;
      }
      if (pick == n) {
        for (std::size_t i = n; i-- > 0 && pick == n;) {
          if (nearest[i] > 0.0) pick = i;
        }
      }
    } else {
      pick = rng.below(n);  // every point coincides with a center
    }
    res.centers.push_back(points[pick]);
  }
  res.assignments.assign(n, std::numeric_limits<std::size_t>::max());

  std::vector<std::size_t> next(n);
  for (std::size_t it = 0; it < max_iter; ++it) {
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = squared_distance(points[i], res.centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = squared_distance(points[i], res.centers[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      next[i] = best;
      ++counts[best];
    }
    // An empty cluster takes the point farthest from its current center,
    // drawn from a cluster that can spare one.
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t donor = n;
      double far = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[next[i]] < 2) continue;
        const double d = squared_distance(points[i], res.centers[next[i]]);
        if (d > far) {
          far = d;
          donor = i;
        }
      }
      --counts[next[donor]];
      next[donor] = c;
      counts[c] = 1;
    }
    const bool stable = next == res.assignments;
    res.assignments = next;
    res.centers = cluster_means(points, res.assignments, k);
    res.inertia = inertia_of(points, res.assignments, res.centers);
    res.inertia_history.push_back(res.inertia);
    res.iterations = it + 1;
    if (stable) {
      res.converged = true;
      break;
    }
  }
  if (res.converged) hartigan_refine(points, k, res);
  return res;
}

}  // namespace

KMeansResult kmeans_fit(std::span<const std::vector<double>> points, std::size_t k, std::uint64_t seed,
                        const KMeansOptions& options) {
  if (points.empty()) throw ArgumentError("kmeans needs at least one point");
  if (k == 0) throw ArgumentError("kmeans needs k >= 1");
  if (k > points.size()) throw ArgumentError("kmeans: k exceeds the number of points");
  if (options.max_iter == 0) throw ArgumentError("kmeans needs max_iter >= 1");
  const std::size_t dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw ShapeError("kmeans points differ in dimension");
    for (double v : p) {
      if (!std::isfinite(v)) throw NumericError("non-finite kmeans input");
    }
  }
  Rng rng(seed);
  KMeansResult best;
  const std::size_t runs = std::max<std::size_t>(1, options.restarts);
  for (std::size_t r = 0; r < runs; ++r) {
    auto res = lloyd(points, k, rng, options.max_iter);
    if (r == 0 || res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

std::vector<std::size_t> kmeans(std::span<const std::vector<double>> points, std::size_t k, std::uint64_t seed,
                                std::size_t max_iter) {
  KMeansOptions opts;
  opts.max_iter = max_iter;
  return kmeans_fit(points, k, seed, opts).assignments;
}

double within_cluster_ss(std::span<const std::vector<double>> points, std::span<const std::size_t> assignments,
                         std::size_t k) {
  if (points.size() != assignments.size()) throw ShapeError("assignment count differs from point count");
  for (auto a : assignments) {
    if (a >= k) throw ArgumentError("cluster index out of range");
  }
  if (points.empty()) return 0.0;
  return inertia_of(points, assignments, cluster_means(points, assignments, k));
}

std::vector<double> color_summary(const Patch& patch) {
  patch.validate();
  std::vector<double> out(9, 0.0);
  std::array<std::size_t, 3> rows{};
  for (std::size_t r = 0; r < patch.side; ++r) {
    const std::size_t band = std::min<std::size_t>(2, r * 3 / patch.side);
    rows[band] += 1;
    for (std::size_t c = 0; c < patch.side; ++c) {
      for (std::size_t ch = 0; ch < 3; ++ch) out[band * 3 + ch] += patch.at(r, c, ch);
    }
  }
  for (std::size_t band = 0; band < 3; ++band) {
    const double denom = 255.0 * static_cast<double>(std::max<std::size_t>(1, rows[band] * patch.side));
    for (std::size_t ch = 0; ch < 3; ++ch) out[band * 3 + ch] /= denom;
  }
  return out;
}

std::size_t mosaic_sample_count(std::size_t cluster_size, double fraction) {
  const auto rounded = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(cluster_size)));
  return std::min(cluster_size, std::max<std::size_t>(1, rounded));
}

Mosaic select_mosaic(std::span<const Patch> patches, const MosaicOptions& options, const PatchFeatureFn& feature_fn) {
  if (!(options.fraction > 0.0 && options.fraction <= 1.0)) throw ArgumentError("mosaic fraction must lie in (0, 1]");
  if (options.k == 0) throw ArgumentError("mosaic needs k >= 1");

  Mosaic mosaic;
  mosaic.fraction = options.fraction;
  mosaic.cluster_of.assign(patches.size(), -1);
  if (!patches.empty()) mosaic.slide_id = patches.front().slide_id;

  std::vector<std::size_t> tissue;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (tissue_mask(patches[i], options.tissue_threshold).is_tissue) tissue.push_back(i);
  }
  if (tissue.empty()) throw EmptySlideError("no tissue patches on slide '" + mosaic.slide_id + "'");

  std::vector<std::vector<double>> features;
  features.reserve(tissue.size());
  for (auto i : tissue) features.push_back(feature_fn(patches[i]));

  mosaic.k = std::min(options.k, tissue.size());
  const auto clusters = kmeans_fit(features, mosaic.k, options.seed, options.kmeans);

  std::vector<std::vector<std::size_t>> members(mosaic.k);
  for (std::size_t t = 0; t < tissue.size(); ++t) {
    members[clusters.assignments[t]].push_back(tissue[t]);
    mosaic.cluster_of[tissue[t]] = static_cast<std::int32_t>(clusters.assignments[t]);
  }

  Rng rng(options.seed ^ 0x6D6F73616963ULL);
  for (std::size_t c = 0; c < mosaic.k; ++c) {
    auto& m = members[c];
    mosaic.cluster_sizes.push_back(m.size());
    const std::size_t take = mosaic_sample_count(m.size(), options.fraction);
    rng.shuffle(std::span<std::size_t>(m));
    std::vector<std::size_t> picked(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(picked.begin(), picked.end());
    for (auto i : picked) {
      mosaic.selected.push_back(patches[i]);
      mosaic.selected_index.push_back(i);
      mosaic.selected_cluster.push_back(c);
    }
  }
  return mosaic;
}

void Bag::validate() const {
  if (features.empty()) throw ArgumentError("bag '" + slide_id + "' is empty");
  const std::size_t d = features.front().size();
  if (d == 0) throw ShapeError("bag feature dimension is zero");
  for (const auto& f : features) {
    if (f.size() != d) throw ShapeError("bag feature vectors differ in dimension");
    for (double v : f) {
      if (!std::isfinite(v)) throw NumericError("non-finite bag feature");
    }
  }
  if (!coords.empty() && coords.size() != features.size()) throw ShapeError("bag coordinate count mismatch");
}

Bag build_bag(const Mosaic& mosaic, const PatchEncoder& encoder, HierarchicalLabel label) {
  if (mosaic.selected.empty()) throw ArgumentError("cannot build a bag from an empty mosaic");
  Bag bag;
  bag.slide_id = mosaic.slide_id;
  bag.label = label;
  for (const auto& patch : mosaic.selected) {
    auto f = encoder(patch);
    if (!bag.features.empty() && f.size() != bag.features.front().size()) {
      throw ShapeError("encoder output dimension changed between patches");
    }
    bag.features.push_back(std::move(f));
    bag.coords.push_back(patch.grid);
  }
  bag.validate();
  return bag;
}

namespace {
constexpr std::string_view kBagMagic = "FOCATBAG";
}

std::vector<std::uint8_t> encode_bag(const Bag& bag) {
  bag.validate();
  ByteWriter w;
  w.put_raw(kBagMagic);
  w.put_u32(kBagVersion);
  w.put_string(bag.slide_id);
  w.put_u64(bag.size());
  w.put_u64(bag.dim());
  w.put_i32(bag.label.site);
  w.put_i32(bag.label.diagnosis);
  w.put_u8(bag.has_provenance() ? 1 : 0);
  for (const auto& c : bag.coords) {
    w.put_i32(c.row);
    w.put_i32(c.col);
  }
  for (const auto& f : bag.features) w.put_f64s(f);
  return w.bytes();
}

Bag decode_bag(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  if (r.get_raw(kBagMagic.size()) != kBagMagic) throw IoError("not a bag file (bad magic)");
  if (const auto v = r.get_u32(); v != kBagVersion) throw IoError("unsupported bag version " + std::to_string(v));
  Bag bag;
  bag.slide_id = r.get_string();
  const auto n = r.get_u64();
  const auto d = r.get_u64();
  if (n == 0 || d == 0) throw IoError("bag file declares an empty bag");
  if (n * d * 8 > r.remaining()) throw IoError("bag file is truncated");
  bag.label.site = r.get_i32();
  bag.label.diagnosis = r.get_i32();
  const auto has_coords = r.get_u8();
  if (has_coords > 1) throw IoError("bad provenance flag in bag file");
  if (has_coords) {
    bag.coords.resize(n);
    for (auto& c : bag.coords) {
      c.row = r.get_i32();
      c.col = r.get_i32();
    }
  }
  bag.features.assign(n, std::vector<double>(d));
  for (auto& f : bag.features) r.get_f64s(f);
  if (!r.at_end()) throw IoError("trailing bytes in bag file");
  bag.validate();
  return bag;
}

void write_bag(const std::filesystem::path& path, const Bag& bag) {
  ByteWriter w;
  const auto bytes = encode_bag(bag);
  w.put_raw(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  w.write_to(path);
}

Bag read_bag(const std::filesystem::path& path) { return decode_bag(read_file_bytes(path)); }

std::vector<Bag> read_bag_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".bag") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Bag> bags;
  bags.reserve(files.size());
  for (const auto& f : files) bags.push_back(read_bag(f));
  return bags;
}

std::uint64_t bag_checksum(const Bag& bag) { return fnv1a64(encode_bag(bag)); }

std::vector<Patch> read_slide_dir(const std::filesystem::path& dir, std::size_t side) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a slide directory: " + dir.string());
  static const std::regex name_re(R"(r(\d+)_c(\d+)\.(png|ppm|pnm))", std::regex::icase);
  std::map<std::pair<std::int32_t, std::int32_t>, std::filesystem::path> tiles;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename().string();
    std::smatch m;
    if (!std::regex_match(name, m, name_re)) continue;
    const auto key = std::make_pair(std::stoi(m[1].str()), std::stoi(m[2].str()));
    if (!tiles.emplace(key, entry.path()).second) throw IoError("duplicate tile position in " + dir.string());
  }
  auto norm = std::filesystem::absolute(dir).lexically_normal();
  if (norm.filename().empty()) norm = norm.parent_path();
  const std::string slide_id = norm.filename().string();
  std::vector<Patch> patches;
  for (const auto& [pos, path] : tiles) {
    const Image img = read_rgb_image(path);
    if (img.width != img.height || img.channels != 3) throw ShapeError("tile is not square RGB: " + path.string());
    Patch p{img.width, img.pixels, GridCoord{pos.first, pos.second}, slide_id};
    patches.push_back(side == 0 || side == p.side ? std::move(p) : resize_patch(p, side));
  }
  return patches;
}

void write_slide_dir(const std::filesystem::path& dir, std::span<const Patch> patches) {
  std::filesystem::create_directories(dir);
  for (const auto& p : patches) {
    p.validate();
    Image img{p.side, p.side, 3, p.pixels};
    write_ppm(dir / ("r" + std::to_string(p.grid.row) + "_c" + std::to_string(p.grid.col) + ".ppm"), img);
  }
}

}  // namespace focatt
