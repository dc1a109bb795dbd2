#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace stlm {

// Streaming MD5 (RFC 1321). Integrity check only.
class Md5 {
 public:
  Md5();
  void update(std::span<const std::uint8_t> data);
  void update(std::string_view data) {
    update(std::span(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
  }
  std::array<std::uint8_t, 16> digest();  // finalizes; the object is spent afterwards
  std::string hex_digest();

 private:
  void transform(const std::uint8_t* block);

  std::array<std::uint32_t, 4> state_;
  std::array<std::uint8_t, 64> buffer_{};
  std::uint64_t length_ = 0;  // bytes
};

std::string md5_hex(std::span<const std::uint8_t> bytes);
std::string md5_hex(std::string_view bytes);
// Streams the file; throws IoError if it cannot be read.
std::string md5_file(const std::string& path);
std::string to_hex(std::span<const std::uint8_t> bytes);

}  // namespace stlm
