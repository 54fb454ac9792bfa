#pragma once

// Versioned flat checkpoint file. Layout (all integers little-endian):
//
//   8 bytes   magic "FOCATTCK"
//   u32       format version (currently 1)
//   u64       rng seed the parameters were initialised from
//   u32       metadata entry count, then per entry: string key, string value
//   u32       network count, then per network:
//               string name, f64 dropout rate, u32 layer count,
//               per layer: u32 in, u32 out, u8 activation tag
//   f64[]     parameters: for each network, for each layer, weight
//             (out*in, row-major) then bias (out)
//
// A string is a u32 byte length followed by the bytes. See docs/FORMATS.md.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "focatt/nncore.hpp"

namespace focatt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Mlp>> networks;

  std::optional<std::string> find_meta(const std::string& key) const;
  const std::string& require_meta(const std::string& key) const;
  const Mlp& require_network(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace focatt
