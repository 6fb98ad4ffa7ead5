#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace llavaseg {

std::string sha256_hex(std::string_view bytes);

/// Content hash in the same form git uses for blobs: sha1("blob <len>\0" + bytes).
std::string git_blob_sha1(std::string_view bytes);

/// 64-bit FNV-1a. Used to seed per-token pseudorandom streams.
constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, std::string_view bytes);

}  // namespace llavaseg
