#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "cigocc/errors.hpp"

// Little-endian byte helpers shared by the binary formats.
namespace cigocc::io {

using Bytes = std::vector<std::uint8_t>;

template <class U>
void put_le(Bytes& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <class U>
U get_le(std::span<const std::uint8_t> in, std::size_t at) {
  static_assert(std::is_unsigned_v<U>);
  if (at + sizeof(U) > in.size()) throw TruncatedError("unexpected end of data");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in[at + i]) << (8 * i));
  return v;
}

inline void put_f32(Bytes& out, float value) { put_le(out, std::bit_cast<std::uint32_t>(value)); }

inline float get_f32(std::span<const std::uint8_t> in, std::size_t at) {
  return std::bit_cast<float>(get_le<std::uint32_t>(in, at));
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// FNV-1a, used for parameter checksums.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 1469598103934665603ull) {
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace cigocc::io
