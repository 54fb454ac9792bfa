#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace focatt {

// Little-endian encoder independent of host byte order.
class ByteWriter {
 public:
  void put_u8(std::uint8_t v) { bytes_.push_back(v); }
  void put_u32(std::uint32_t v);
  void put_i32(std::int32_t v) { put_u32(static_cast<std::uint32_t>(v)); }
  void put_u64(std::uint64_t v);
  void put_f64(double v);
  void put_f64s(std::span<const double> values);
  void put_raw(std::string_view raw);
  /// u32 length prefix followed by the raw bytes.
  void put_string(std::string_view s);

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  void write_to(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}
  static ByteReader from_file(const std::filesystem::path& path);

  std::uint8_t get_u8();
  std::uint32_t get_u32();
  std::int32_t get_i32() { return static_cast<std::int32_t>(get_u32()); }
  std::uint64_t get_u64();
  double get_f64();
  void get_f64s(std::span<double> out);
  std::string get_raw(std::size_t n);
  std::string get_string();

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const;

  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

}  // namespace focatt
