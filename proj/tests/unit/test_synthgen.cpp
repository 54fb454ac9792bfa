#include <map>
#include <set>

#include "doctest.h"

#include "focatt/error.hpp"
#include "focatt/synthgen.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace focatt;

namespace {

std::string tree_digest(const std::filesystem::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[std::filesystem::relative(e.path(), root).string()] = fixture::slurp(e.path());
  }
  std::string out;
  for (const auto& [name, body] : files) out += name + '\n' + std::to_string(std::hash<std::string>{}(body)) + '\n';
  return out;
}

}  // namespace

TEST_SUITE("synthgen") {
  TEST_CASE("spec parsing") {
    const auto spec = SynthSpec::parse("# planted\ndiagnoses_per_site = 1, 3\nnoise_sigma = 0.25\ncontext_coupled = true\n");
    CHECK(spec.diagnoses_per_site == std::vector<std::size_t>{1, 3});
    CHECK(spec.noise_sigma == 0.25);
    CHECK(spec.context_coupled);
    CHECK(SynthSpec::parse(spec.serialize()).serialize() == spec.serialize());
    CHECK_THROWS_AS(SynthSpec::parse("bogus = 1\n"), ArgumentError);
    CHECK_THROWS_AS(SynthSpec::parse("noise_sigma = -1\n"), ArgumentError);
    CHECK_THROWS_AS(SynthSpec::parse("key_fraction = 0\n"), ArgumentError);
    CHECK_THROWS_AS(SynthSpec::parse("bags_per_diagnosis = 0\n"), ArgumentError);
    CHECK_THROWS(SynthSpec::parse("noise_sigma = abc\n"));
  }

  TEST_CASE("counts, balance and disjoint stratified splits") {
    SynthSpec spec;
    const auto data = generate_bags(spec);
    CHECK(data.table.site_count() == 2);
    CHECK(data.table.diagnosis_count() == 4);
    CHECK(data.train.size() + data.test.size() == 200);
    std::map<std::int32_t, std::size_t> all, test;
    std::set<std::string> ids;
    for (const auto& b : data.train) {
      ++all[b.label.diagnosis];
      ids.insert(b.slide_id);
    }
    for (const auto& b : data.test) {
      ++all[b.label.diagnosis];
      ++test[b.label.diagnosis];
      CHECK(ids.insert(b.slide_id).second);
    }
    for (const auto& [d, n] : all) CHECK(n == 50);
    for (const auto& [d, n] : test) CHECK(n == test.begin()->second);
    for (const auto& b : data.train) {
      CHECK(b.size() >= spec.instances_min);
      CHECK(b.size() <= spec.instances_max);
      CHECK(b.has_provenance());
      CHECK(data.table.site_of(static_cast<std::size_t>(b.label.diagnosis)) == static_cast<std::size_t>(b.label.site));
    }
  }

  TEST_CASE("noiseless full-key bags repeat their signature") {
    SynthSpec spec;
    spec.noise_sigma = 0.0;
    spec.key_fraction = 1.0;
    const auto data = generate_bags(spec);
    std::map<std::int32_t, std::vector<double>> signature;
    for (const auto& b : data.train) {
      for (const auto& x : b.features) {
        auto [it, fresh] = signature.emplace(b.label.diagnosis, x);
        CHECK(it->second == x);
      }
    }
    CHECK(signature.size() == 4);
    CHECK(data.oracle_accuracy == 1.0);
  }

  TEST_CASE("keys mark the planted instances") {
    SynthSpec spec;
    spec.noise_sigma = 0.0;
    const auto data = generate_bags(spec);
    for (std::size_t b = 0; b < data.train.size(); ++b) {
      const auto& keys = data.train_keys[b];
      const auto& bag = data.train[b];
      REQUIRE(keys.size() == bag.size());
      std::size_t k = 0;
      for (std::size_t i = 0; i < keys.size(); ++i) {
        k += keys[i];
        double norm = 0.0;
        for (double v : bag.features[i]) norm += v * v;
        CHECK((norm > 0.0) == (keys[i] == 1));
      }
      const auto want = static_cast<std::size_t>(std::clamp<long>(std::lround(spec.key_fraction * static_cast<double>(bag.size())), 1,
                                                                  static_cast<long>(bag.size())));
      CHECK(k == want);
    }
  }

  TEST_CASE("coupled bags carry one trusted key") {
    SynthSpec spec;
    spec.context_coupled = true;
    spec.diagnoses_per_site = {1, 1};
    spec.bags_per_diagnosis = 20;
    const auto data = generate_bags(spec);
    for (const auto& keys : data.train_keys) {
      std::size_t k = 0;
      for (auto v : keys) k += v;
      CHECK(k >= 1);
    }
    CHECK(data.oracle_accuracy > 0.9);
  }

  TEST_CASE("generation is a pure function of the spec") {
    SynthSpec spec;
    spec.bags_per_diagnosis = 6;
    spec.slides_per_diagnosis = 1;
    spec.patches_per_diagnosis = 3;
    spec.patch_side = 8;
    spec.grid_rows = spec.grid_cols = 4;
    fixture::TempDir a("synth-a"), b("synth-b");
    for (const auto* dir : {&a, &b}) {
      const auto data = generate_bags(spec);
      write_bags(dir->path() / "bags", data);
      write_slides(dir->path() / "slides", generate_slides(spec), data.table);
      write_labeled_patches(dir->path() / "patches", generate_labeled_patches(spec), data.table);
    }
    CHECK(tree_digest(a.path()) == tree_digest(b.path()));
    spec.seed = 1;
    CHECK(generate_bags(spec).train != generate_bags(SynthSpec::parse("bags_per_diagnosis = 6\n")).train);
  }

  TEST_CASE("slides: tissue ground truth agrees with the tissue mask") {
    SynthSpec spec;
    spec.slides_per_diagnosis = 1;
    for (const auto& slide : generate_slides(spec)) {
      REQUIRE(slide.patches.size() == spec.grid_rows * spec.grid_cols);
      std::size_t tissue = 0;
      for (std::size_t i = 0; i < slide.patches.size(); ++i) {
        CHECK(tissue_mask(slide.patches[i]).is_tissue == (slide.tissue[i] == 1));
        tissue += slide.tissue[i];
      }
      CHECK(tissue > 0);
    }
  }

  TEST_CASE("four distinct textures are recovered by kmeans with k = 4") {
    SynthSpec spec;
    spec.patch_side = 8;
    std::vector<Patch> patches;
    std::vector<std::size_t> texture;
    for (std::int32_t t = 0; t < 4; ++t) {
      for (std::uint64_t v = 0; v < 2; ++v) {
        patches.push_back(texture_patch(spec, t, v, {t, static_cast<std::int32_t>(v)}));
        texture.push_back(static_cast<std::size_t>(t));
      }
    }
    std::vector<std::vector<double>> feats;
    for (const auto& p : patches) feats.push_back(color_summary(p));
    const auto fit = kmeans_fit(feats, 4, 0);
    std::vector<std::set<std::size_t>> members(4);
    for (std::size_t i = 0; i < patches.size(); ++i) members[fit.assignments[i]].insert(texture[i]);
    for (const auto& m : members) CHECK(m.size() == 1);
    CHECK(fit.inertia <= oracle::best_partition_ss(feats, 4) * (1.0 + 1e-9) + 1e-12);
  }

  TEST_CASE("labeled patches round-trip through their directory") {
    SynthSpec spec;
    spec.patches_per_diagnosis = 2;
    spec.patch_side = 8;
    const auto table = synth_hierarchy(spec);
    const auto patches = generate_labeled_patches(spec);
    fixture::TempDir dir("patches");
    write_labeled_patches(dir.path(), patches, table);
    const auto back = read_labeled_patches(dir.path(), table);
    REQUIRE(back.size() == patches.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].label == patches[i].label);
      CHECK(back[i].patch.pixels == patches[i].patch.pixels);
    }
  }
}
