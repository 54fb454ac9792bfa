#include "focatt/hierarchy.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "focatt/error.hpp"

namespace focatt {

HierarchyTable::HierarchyTable(const std::vector<std::pair<std::string, std::string>>& diagnosis_site_pairs) {
  if (diagnosis_site_pairs.empty()) throw ArgumentError("hierarchy table needs at least one diagnosis");
  for (const auto& [diagnosis, site] : diagnosis_site_pairs) {
    if (diagnosis.empty() || site.empty()) throw ArgumentError("empty diagnosis or site name");
    if (std::find(diagnoses_.begin(), diagnoses_.end(), diagnosis) != diagnoses_.end()) {
      throw ArgumentError("diagnosis listed twice: " + diagnosis);
    }
    auto it = std::find(sites_.begin(), sites_.end(), site);
    std::size_t site_index = static_cast<std::size_t>(it - sites_.begin());
    if (it == sites_.end()) {
      sites_.push_back(site);
      groups_.emplace_back();
    }
    groups_[site_index].push_back(diagnoses_.size());
    site_of_.push_back(site_index);
    diagnoses_.push_back(diagnosis);
  }
}

HierarchyTable HierarchyTable::parse(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw IoError("hierarchy line " + std::to_string(line_no) + ": expected 'diagnosis<TAB>site'");
    }
    pairs.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return HierarchyTable(pairs);
}

HierarchyTable HierarchyTable::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open hierarchy file: " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

std::string HierarchyTable::serialize() const {
  std::string out;
  for (std::size_t d = 0; d < diagnoses_.size(); ++d) {
    out += diagnoses_[d];
    out += '\t';
    out += sites_[site_of_[d]];
    out += '\n';
  }
  return out;
}

void HierarchyTable::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write hierarchy file: " + path.string());
  out << serialize();
}

std::size_t HierarchyTable::diagnosis_index(std::string_view name) const {
  auto it = std::find(diagnoses_.begin(), diagnoses_.end(), name);
  if (it == diagnoses_.end()) throw ArgumentError("unknown diagnosis: " + std::string(name));
  return static_cast<std::size_t>(it - diagnoses_.begin());
}

HierarchicalLabel HierarchyTable::label_for(std::string_view diagnosis) const {
  return label_for(diagnosis_index(diagnosis));
}

HierarchicalLabel HierarchyTable::label_for(std::size_t diagnosis) const {
  if (diagnosis >= diagnoses_.size()) throw ArgumentError("diagnosis index out of range");
  return {static_cast<std::int32_t>(site_of_[diagnosis]), static_cast<std::int32_t>(diagnosis)};
}

void HierarchyTable::check(const HierarchicalLabel& label) const {
  if (label.diagnosis < 0 || static_cast<std::size_t>(label.diagnosis) >= diagnoses_.size()) {
    throw ArgumentError("diagnosis index out of range");
  }
  if (label.site < 0 || site_of_[static_cast<std::size_t>(label.diagnosis)] != static_cast<std::size_t>(label.site)) {
    throw ArgumentError("label site does not own its diagnosis in the hierarchy table");
  }
}

}  // namespace focatt
