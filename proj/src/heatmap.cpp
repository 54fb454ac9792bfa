#include "focatt/heatmap.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <string>

#include "focatt/error.hpp"

namespace focatt {

std::vector<std::uint8_t> attention_intensities(std::span<const double> attention) {
  if (attention.empty()) throw ArgumentError("no attention values to normalise");
  for (double a : attention) {
    if (!std::isfinite(a)) throw NumericError("attention value is not finite");
  }
  const auto [lo, hi] = std::minmax_element(attention.begin(), attention.end());
  std::vector<std::uint8_t> out(attention.size(), kConstantAttentionLevel);
  if (*hi == *lo) return out;
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < attention.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (attention[i] - *lo) / range));
  }
  return out;
}

Image render_heatmap(std::span<const GridCoord> coords, std::span<const double> attention, std::size_t rows,
                     std::size_t cols, std::size_t cell) {
  if (coords.empty()) throw ProvenanceError("bag instances carry no grid coordinates");
  if (coords.size() != attention.size()) throw ShapeError("one coordinate per attention value is required");
  if (cell == 0) throw ArgumentError("heat-map cell size must be >= 1");
  const auto levels = attention_intensities(attention);
  Image img;
  img.width = cols * cell;
  img.height = rows * cell;
  img.channels = 1;
  img.pixels.assign(img.width * img.height, 0);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto& g = coords[i];
    if (g.row < 0 || g.col < 0 || static_cast<std::size_t>(g.row) >= rows || static_cast<std::size_t>(g.col) >= cols) {
      throw ShapeError("instance " + std::to_string(i) + " lies outside the " + std::to_string(rows) + "x" +
                       std::to_string(cols) + " grid");
    }
    for (std::size_t y = 0; y < cell; ++y) {
      const std::size_t row = static_cast<std::size_t>(g.row) * cell + y;
      std::fill_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(row * img.width + static_cast<std::size_t>(g.col) * cell),
                  cell, levels[i]);
    }
  }
  return img;
}

void write_attention_csv(const std::filesystem::path& path, std::span<const GridCoord> coords,
                         std::span<const double> attention) {
  if (coords.size() != attention.size()) throw ShapeError("one coordinate per attention value is required");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "instance_index,grid_row,grid_col,attention\n";
  char buf[64];
  for (std::size_t i = 0; i < attention.size(); ++i) {
    const auto res = std::to_chars(buf, buf + sizeof buf, attention[i]);
    out << i << ',' << coords[i].row << ',' << coords[i].col << ',' << std::string_view(buf, res.ptr - buf) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_heatmap_image(const std::filesystem::path& path, const Image& gray) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") {
    if (!png_supported()) throw ArgumentError("PNG output requested but PNG support is not compiled in");
    write_png_gray(path, gray);
  } else if (ext == ".pgm") {
    write_pgm_plain(path, gray);
  } else {
    throw ArgumentError("heat-map image must end in .pgm or .png: " + path.string());
  }
}

}  // namespace focatt
