#include "focatt/image_io.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>

#include "focatt/binary_io.hpp"
#include "focatt/error.hpp"

#ifdef FOCATT_HAVE_PNG
#include <png.h>
#endif

namespace focatt {

namespace {

// Reads the next whitespace-delimited PNM header token, skipping comments.
std::string next_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') tok += static_cast<char>(bytes[pos++]);
  if (tok.empty()) throw IoError("truncated PNM header");
  return tok;
}

std::size_t parse_size(const std::string& tok) {
  std::size_t idx = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(tok, &idx);
  } catch (const std::exception&) {
    throw IoError("bad number in PNM header: " + tok);
  }
  if (idx != tok.size()) throw IoError("bad number in PNM header: " + tok);
  return v;
}

std::string lower_ext(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  const auto magic = next_token(bytes, pos);
  if (magic != "P6" && magic != "P3") throw IoError("not a PPM file: " + path.string());
  Image img;
  img.width = parse_size(next_token(bytes, pos));
  img.height = parse_size(next_token(bytes, pos));
  const auto maxval = parse_size(next_token(bytes, pos));
  if (maxval != 255) throw IoError("only maxval 255 PPM files are supported: " + path.string());
  if (img.width == 0 || img.height == 0) throw IoError("empty PPM image: " + path.string());
  img.channels = 3;
  const std::size_t count = img.width * img.height * 3;
  img.pixels.resize(count);
  if (magic == "P6") {
    ++pos;  // single whitespace byte after maxval
    if (bytes.size() < pos + count) throw IoError("truncated PPM raster: " + path.string());
    std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
              bytes.begin() + static_cast<std::ptrdiff_t>(pos + count), img.pixels.begin());
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const auto v = parse_size(next_token(bytes, pos));
      if (v > 255) throw IoError("PPM sample out of range: " + path.string());
      img.pixels[i] = static_cast<std::uint8_t>(v);
    }
  }
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& rgb) {
  if (rgb.channels != 3 || rgb.pixels.size() != rgb.width * rgb.height * 3) throw ShapeError("write_ppm needs RGB data");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image: " + path.string());
  out << "P6\n" << rgb.width << ' ' << rgb.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.pixels.data()), static_cast<std::streamsize>(rgb.pixels.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_pgm_plain(const std::filesystem::path& path, const Image& gray) {
  if (gray.channels != 1 || gray.pixels.size() != gray.width * gray.height) throw ShapeError("write_pgm needs gray data");
  std::ostringstream body;
  body << "P2\n" << gray.width << ' ' << gray.height << "\n255\n";
  for (std::size_t r = 0; r < gray.height; ++r) {
    for (std::size_t c = 0; c < gray.width; ++c) {
      const bool line_start = c % 16 == 0;
      if (!line_start) body << ' ';
      body << static_cast<int>(gray.pixels[r * gray.width + c]);
      if (c % 16 == 15 || c + 1 == gray.width) body << '\n';
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image: " + path.string());
  out << body.str();
}

#ifdef FOCATT_HAVE_PNG

bool png_supported() { return true; }

Image read_png_rgb(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  Image img;
  img.width = png.width;
  img.height = png.height;
  img.channels = 3;
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IoError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  return img;
}

void write_png_gray(const std::filesystem::path& path, const Image& gray) {
  if (gray.channels != 1 || gray.pixels.size() != gray.width * gray.height) throw ShapeError("write_png needs gray data");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(gray.width);
  png.height = static_cast<png_uint_32>(gray.height);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, gray.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

#else

bool png_supported() { return false; }

Image read_png_rgb(const std::filesystem::path& path) {
  throw IoError("PNG support not compiled in: " + path.string());
}

void write_png_gray(const std::filesystem::path& path, const Image&) {
  throw IoError("PNG support not compiled in: " + path.string());
}

#endif

Image read_rgb_image(const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".ppm" || ext == ".pnm") return read_ppm(path);
  if (ext == ".png") return read_png_rgb(path);
  throw IoError("unsupported image type: " + path.string());
}

}  // namespace focatt
