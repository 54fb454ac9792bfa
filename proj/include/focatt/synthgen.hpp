#pragma once

// Deterministic generators for datasets with planted structure: feature bags
// (plain and context-coupled), patch-grid slides and labeled patches.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "focatt/bagprep.hpp"
#include "focatt/hierarchy.hpp"

namespace focatt {

struct SynthSpec {
  std::vector<std::size_t> diagnoses_per_site = {2, 2};  // one entry per site
  std::size_t bags_per_diagnosis = 50;
  std::size_t instances_min = 8;
  std::size_t instances_max = 16;
  std::size_t feature_dim = 16;
  double key_fraction = 0.25;
  double noise_sigma = 0.5;
  /// Length of the shared per-site direction and of the per-diagnosis direction.
  double site_scale = 4.0;
  double diagnosis_scale = 4.0;
  bool context_coupled = false;
  /// Coupled datasets only: probability that a bag's context is m1.
  double marker_bias = 0.5;
  double test_fraction = 0.25;
  std::uint64_t seed = 0;

  // slides and patches for the image pipeline; 0 disables them
  std::size_t slides_per_diagnosis = 0;
  std::size_t grid_rows = 8;
  std::size_t grid_cols = 8;
  std::size_t patch_side = 32;
  std::size_t patches_per_diagnosis = 0;

  std::size_t site_count() const { return diagnoses_per_site.size(); }
  std::size_t diagnosis_count() const;
  /// Throws ArgumentError on counts < 1 or fractions out of range.
  void validate() const;

  /// `key = value` lines; unknown keys and malformed values are errors.
  static SynthSpec parse(std::string_view text);
  static SynthSpec read(const std::filesystem::path& path);
  /// Every field, one per line, in a fixed order.
  std::string serialize() const;
};

/// Diagnoses named `site{s}_dx{k}`, owned by `site{s}`.
HierarchyTable synth_hierarchy(const SynthSpec& spec);

struct SynthBags {
  HierarchyTable table;
  std::vector<Bag> train;
  std::vector<Bag> test;
  // 1 marks an instance carrying the label-determining signal
  std::vector<std::vector<std::uint8_t>> train_keys;
  std::vector<std::vector<std::uint8_t>> test_keys;
  /// Accuracy of the planted decision rule on fresh bags from the same process.
  double oracle_accuracy = 0.0;
};

// Plain datasets: diagnosis d has signature s_d = site direction + diagnosis
// direction. A bag of n instances holds k = clamp(round(f n), 1, n) key
// instances s_d + N(0, sigma^2) and background instances N(0, sigma^2).
//
// Context-coupled datasets: every bag holds one "a" instance and one "b"
// instance; all other instances are context instances of one bag-wide type,
// m1 or m2. Under m1 the a-instance shows the label and the b-instance a
// uniformly drawn diagnosis; under m2 the roles swap. No single instance
// decides the label: the context, which only the bag as a whole reveals,
// selects the instance to trust. With two classes, a score that adds up
// instance contributions is right on at most 7/8 of bags. The key instance is
// the trusted one. key_fraction is not used.
SynthBags generate_bags(const SynthSpec& spec);

/// Bayes-rule accuracy for plain specs (1.0 when sigma = 0), planted-rule
/// accuracy with nearest-signature instance typing for coupled specs;
/// estimated on `samples` fresh bags.
double oracle_accuracy(const SynthSpec& spec, std::size_t samples = 2000);

struct SynthSlide {
  std::string slide_id;
  HierarchicalLabel label;
  std::vector<Patch> patches;       // full grid, row-major
  std::vector<std::uint8_t> tissue;  // ground-truth tissue flag per patch
  std::vector<std::int32_t> texture; // texture id per patch, -1 for background
};

/// Textures: ids [0, diagnosis_count) are diagnosis-specific, then two shared
/// normal-tissue textures. A slide is a tissue ellipse on a near-white
/// background; a key_fraction share of tissue cells carry the diagnosis texture.
std::vector<SynthSlide> generate_slides(const SynthSpec& spec);

/// Number of texture ids used by generate_slides.
std::size_t texture_count(const SynthSpec& spec);

/// One patch of a texture; `variant` perturbs the noise only.
Patch texture_patch(const SynthSpec& spec, std::int32_t texture, std::uint64_t variant, GridCoord grid = {});

/// A near-white background patch.
Patch background_patch(std::size_t side, std::uint64_t variant, GridCoord grid = {});

struct LabeledPatch {
  Patch patch;
  HierarchicalLabel label;
};

/// patches_per_diagnosis diagnosis-texture patches per diagnosis, shuffled.
std::vector<LabeledPatch> generate_labeled_patches(const SynthSpec& spec);

/// Writes slides/<id>/r{row}_c{col}.ppm, slides/labels.tsv and slides/truth.tsv.
void write_slides(const std::filesystem::path& dir, const std::vector<SynthSlide>& slides,
                  const HierarchyTable& table);

/// Writes p{index}.ppm files plus labels.tsv (`file<TAB>diagnosis`).
void write_labeled_patches(const std::filesystem::path& dir, const std::vector<LabeledPatch>& patches,
                           const HierarchyTable& table);
std::vector<LabeledPatch> read_labeled_patches(const std::filesystem::path& dir, const HierarchyTable& table);

/// Writes train/ and test/ bag directories, keys.tsv (`split<TAB>slide_id<TAB>instance`) and
/// hierarchy.tsv.
void write_bags(const std::filesystem::path& dir, const SynthBags& data);

}  // namespace focatt
