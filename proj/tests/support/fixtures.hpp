#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "focatt/bagprep.hpp"
#include "focatt/model.hpp"
#include "focatt/rng.hpp"

namespace fixture {

inline focatt::Bag random_bag(focatt::Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  focatt::Bag bag;
  bag.slide_id = "fixture";
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x(d);
    for (double& v : x) v = scale * rng.normal();
    bag.features.push_back(std::move(x));
  }
  return bag;
}

// Small random architecture with every pool and flag combination reachable.
inline focatt::ModelConfig random_config(focatt::Rng& rng, std::size_t input_dim) {
  focatt::ModelConfig mc;
  mc.input_dim = input_dim;
  mc.class_count = 2 + rng.below(3);
  mc.hidden = 3 + rng.below(6);
  mc.context_dim = 2 + rng.below(5);
  mc.transform_dim = 2 + rng.below(5);
  mc.pool = static_cast<focatt::Pool>(rng.below(3));
  mc.use_context_in_attention = rng.below(4) != 0;
  mc.use_focal = rng.below(4) != 0;
  mc.dropout = 0.0;
  return mc;
}

// Fresh networks start with zero biases, which can park a whole relu layer
// exactly on its kink where finite differences are meaningless.
inline void jitter_biases(std::vector<focatt::Mlp*> nets, focatt::Rng& rng, double sigma = 0.1) {
  for (auto* net : nets) {
    for (auto& layer : net->layers()) {
      for (double& b : layer.bias) b += sigma * rng.normal();
    }
  }
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("focatt-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace fixture
