#pragma once

// Little-endian binary encoding helpers shared by the checkpoint and case
// cache formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace bitr {

/// A file exists but its content violates the expected layout.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, unsupported_version, unsupported_datatype, truncated, checksum, invalid_field };

  FormatError(Kind kind, std::size_t offset, const std::string& what)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        kind_(kind), offset_(offset), detail_(what) {}

  Kind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }
  /// The same error with the offending file named in the message.
  FormatError in_file(const std::filesystem::path& path) const {
    return FormatError(kind_, offset_, path.string() + ": " + detail_);
  }

 private:
  Kind kind_;
  std::size_t offset_;
  std::string detail_;
};

/// A path could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

/// CRC-32 (zlib polynomial) of a byte range.
std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size);

template <class T>
T byteswap_value(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  std::memcpy(&v, b, sizeof(T));
  return v;
}

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_arithmetic_v<T>);
    if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  template <class T>
  void put_array(const T* values, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
      const auto* p = reinterpret_cast<const std::uint8_t*>(values);
      bytes_.insert(bytes_.end(), p, p + count * sizeof(T));
    } else {
      for (std::size_t i = 0; i < count; ++i) put(values[i]);
    }
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }

  void require(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw FormatError(FormatError::Kind::truncated, pos_,
                        std::string("truncated ") + what + ": need " + std::to_string(n) + " bytes, have " +
                            std::to_string(remaining()));
  }

  template <class T>
  T get(const char* what) {
    require(sizeof(T), what);
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
    return v;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    require(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  template <class T>
  void get_array(T* out, std::size_t count, const char* what) {
    if (count > remaining() / sizeof(T)) require(count * sizeof(T), what);
    std::memcpy(out, data_ + pos_, count * sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < count; ++i) out[i] = byteswap_value(out[i]);
    pos_ += count * sizeof(T);
  }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace bitr
