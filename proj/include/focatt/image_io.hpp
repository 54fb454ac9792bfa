#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace focatt {

/// Interleaved 8-bit image, row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;
};

/// Binary (P6) or plain (P3) PPM, maxval 255.
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& rgb);

/// Plain (P2) PGM with maxval 255, at most 16 samples per line.
void write_pgm_plain(const std::filesystem::path& path, const Image& gray);

bool png_supported();
Image read_png_rgb(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const Image& gray);

/// Dispatches on extension: .ppm/.pnm, or .png when PNG support is compiled in.
Image read_rgb_image(const std::filesystem::path& path);

}  // namespace focatt
