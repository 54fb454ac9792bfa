#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace focatt {

/// Anatomic site / primary diagnosis pair. -1 marks an unlabeled bag.
struct HierarchicalLabel {
  std::int32_t site = -1;
  std::int32_t diagnosis = -1;

  bool labeled() const { return site >= 0 && diagnosis >= 0; }
  friend bool operator==(const HierarchicalLabel&, const HierarchicalLabel&) = default;
};

/// Many-to-one map from primary diagnoses to anatomic sites.
class HierarchyTable {
 public:
  HierarchyTable() = default;
  /// Sites are numbered in order of first appearance.
  explicit HierarchyTable(const std::vector<std::pair<std::string, std::string>>& diagnosis_site_pairs);

  /// One line per diagnosis: `diagnosis<TAB>site`. Blank lines and `#` comments are skipped.
  static HierarchyTable parse(std::string_view text);
  static HierarchyTable read(const std::filesystem::path& path);
  std::string serialize() const;
  void write(const std::filesystem::path& path) const;

  std::size_t site_count() const { return sites_.size(); }
  std::size_t diagnosis_count() const { return diagnoses_.size(); }
  const std::vector<std::string>& sites() const { return sites_; }
  const std::vector<std::string>& diagnoses() const { return diagnoses_; }
  std::size_t site_of(std::size_t diagnosis) const { return site_of_.at(diagnosis); }
  /// Diagnoses owned by a site, ascending.
  const std::vector<std::size_t>& group(std::size_t site) const { return groups_.at(site); }

  std::size_t diagnosis_index(std::string_view name) const;
  HierarchicalLabel label_for(std::string_view diagnosis) const;
  HierarchicalLabel label_for(std::size_t diagnosis) const;
  /// Throws ArgumentError unless `label` is consistent with the table.
  void check(const HierarchicalLabel& label) const;

  friend bool operator==(const HierarchyTable&, const HierarchyTable&) = default;

 private:
  std::vector<std::string> sites_;
  std::vector<std::string> diagnoses_;
  std::vector<std::size_t> site_of_;
  std::vector<std::vector<std::size_t>> groups_;
};

}  // namespace focatt
