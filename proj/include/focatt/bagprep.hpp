#pragma once

// Stage one: slide -> tissue patches -> clustered mosaic -> feature bag.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "focatt/hierarchy.hpp"

namespace focatt {

struct GridCoord {
  std::int32_t row = 0;
  std::int32_t col = 0;
  friend bool operator==(const GridCoord&, const GridCoord&) = default;
};

/// Square RGB tile of a slide, row-major interleaved.
struct Patch {
  std::size_t side = 0;
  std::vector<std::uint8_t> pixels;
  GridCoord grid;
  std::string slide_id;

  std::uint8_t at(std::size_t row, std::size_t col, std::size_t channel) const {
    return pixels[(row * side + col) * 3 + channel];
  }
  void validate() const;
};

Patch make_patch(std::size_t side, std::vector<std::uint8_t> pixels, GridCoord grid = {}, std::string slide_id = {});

/// Area-averaging resize (nearest neighbour when enlarging).
Patch resize_patch(const Patch& patch, std::size_t side);

/// Pixels scaled to [0, 1], length side*side*3.
std::vector<double> patch_to_input(const Patch& patch);

inline constexpr double kDefaultTissueThreshold = 0.5;
/// Stricter tissue ratio used as a stand-in for a cellularity filter.
inline constexpr double kStrictTissueThreshold = 0.7;
inline constexpr double kTissueMaxBrightness = 0.8;
inline constexpr double kTissueMinSaturation = 0.05;

struct TissueResult {
  bool is_tissue = false;
  double tissue_ratio = 0.0;
};

/// A pixel is tissue when mean(RGB)/255 < 0.8 and (max-min)/255 > 0.05.
TissueResult tissue_mask(const Patch& patch, double threshold = kDefaultTissueThreshold);

struct KMeansOptions {
  std::size_t max_iter = 100;
  /// Independent seeded initialisations; the lowest final inertia wins.
  std::size_t restarts = 10;
};

struct KMeansResult {
  std::vector<std::size_t> assignments;
  std::vector<std::vector<double>> centers;
  double inertia = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  /// Inertia after each Lloyd iteration, then after each accepted
  /// single-point move, of the winning run.
  std::vector<double> inertia_history;
};

/// Lloyd iterations from k-means++ seeds, refined by single-point moves once
/// converged. Deterministic given (points, k, seed, options).
KMeansResult kmeans_fit(std::span<const std::vector<double>> points, std::size_t k, std::uint64_t seed,
                        const KMeansOptions& options = {});

std::vector<std::size_t> kmeans(std::span<const std::vector<double>> points, std::size_t k, std::uint64_t seed,
                                std::size_t max_iter = 100);

/// Sum of squared distances from each point to its cluster mean.
double within_cluster_ss(std::span<const std::vector<double>> points, std::span<const std::size_t> assignments,
                         std::size_t k);

/// Mean RGB of the top, middle and bottom thirds of a patch (9 values in [0, 1]).
std::vector<double> color_summary(const Patch& patch);

using PatchFeatureFn = std::function<std::vector<double>(const Patch&)>;

struct MosaicOptions {
  std::size_t k = 9;
  double fraction = 0.10;
  std::uint64_t seed = 0;
  double tissue_threshold = kDefaultTissueThreshold;
  KMeansOptions kmeans;
};

struct Mosaic {
  std::string slide_id;
  std::vector<Patch> selected;
  std::vector<std::size_t> selected_index;    // index into the input patch list
  std::vector<std::size_t> selected_cluster;  // cluster of each selected patch
  std::vector<std::int32_t> cluster_of;       // per input patch, -1 for background
  std::vector<std::size_t> cluster_sizes;
  std::size_t k = 0;
  double fraction = 0.0;
};

/// Per-cluster sample count: max(1, round(fraction * cluster_size)).
std::size_t mosaic_sample_count(std::size_t cluster_size, double fraction);

/// Masks background, clusters the tissue patches and samples each cluster
/// without replacement. k is capped at the number of tissue patches.
Mosaic select_mosaic(std::span<const Patch> patches, const MosaicOptions& options = {},
                     const PatchFeatureFn& feature_fn = color_summary);

/// Set of instance feature vectors sharing one slide label. Order carries no meaning.
struct Bag {
  std::string slide_id;
  std::vector<std::vector<double>> features;
  HierarchicalLabel label;
  /// Grid position of each instance; empty when provenance is unknown.
  std::vector<GridCoord> coords;

  std::size_t size() const { return features.size(); }
  std::size_t dim() const { return features.empty() ? 0 : features.front().size(); }
  bool has_provenance() const { return !coords.empty(); }
  void validate() const;

  friend bool operator==(const Bag&, const Bag&) = default;
};

using PatchEncoder = std::function<std::vector<double>(const Patch&)>;

Bag build_bag(const Mosaic& mosaic, const PatchEncoder& encoder, HierarchicalLabel label);

// Bag file layout (little-endian):
//   8 bytes "FOCATBAG", u32 version (1), string slide_id (u32 length + bytes),
//   u64 n, u64 d, i32 site, i32 diagnosis, u8 has_coords,
//   [n x (i32 row, i32 col)] when has_coords, then n*d f64 in instance order.
inline constexpr std::uint32_t kBagVersion = 1;

std::vector<std::uint8_t> encode_bag(const Bag& bag);
Bag decode_bag(std::vector<std::uint8_t> bytes);
void write_bag(const std::filesystem::path& path, const Bag& bag);
Bag read_bag(const std::filesystem::path& path);
/// All `*.bag` files in a directory, sorted by file name.
std::vector<Bag> read_bag_dir(const std::filesystem::path& dir);

/// FNV-1a 64 of the encoded bag; a cheap regression fingerprint.
std::uint64_t bag_checksum(const Bag& bag);

/// Reads `r{row}_c{col}.{png,ppm}` tiles in (row, col) order; tiles not matching
/// `side` are resized, side 0 keeps every tile as stored.
std::vector<Patch> read_slide_dir(const std::filesystem::path& dir, std::size_t side);
void write_slide_dir(const std::filesystem::path& dir, std::span<const Patch> patches);

}  // namespace focatt
