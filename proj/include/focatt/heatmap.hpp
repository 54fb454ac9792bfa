#pragma once

// Attention heat maps: per-bag min-max normalisation painted onto the slide grid.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "focatt/bagprep.hpp"
#include "focatt/image_io.hpp"

namespace focatt {

/// Gray level of a mosaic cell when every attention in the bag is equal.
inline constexpr std::uint8_t kConstantAttentionLevel = 128;

/// round(255 (a - min) / (max - min)) per instance; all kConstantAttentionLevel
/// when max == min.
std::vector<std::uint8_t> attention_intensities(std::span<const double> attention);

/// rows x cols grid of cell x cell squares. Cells holding an instance get its
/// intensity, all other cells are black. Throws ProvenanceError without coordinates.
Image render_heatmap(std::span<const GridCoord> coords, std::span<const double> attention, std::size_t rows,
                     std::size_t cols, std::size_t cell);

/// `instance_index,grid_row,grid_col,attention`, attention printed round-trip exact.
void write_attention_csv(const std::filesystem::path& path, std::span<const GridCoord> coords,
                         std::span<const double> attention);

/// Plain PGM for .pgm, PNG for .png when compiled with PNG support.
void write_heatmap_image(const std::filesystem::path& path, const Image& gray);

}  // namespace focatt
