#pragma once

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cigocc/io.hpp"
#include "cigocc/ndgrad/tensor.hpp"

// NDG1 tensor snapshots: "NDG1", u32 rank, u64 dims..., f32 values, all
// little-endian and row-major. A checkpoint directory holds one snapshot per
// parameter plus manifest.txt with "name<TAB>file" lines.
namespace cigocc::nd {

inline constexpr char kSnapshotMagic[4] = {'N', 'D', 'G', '1'};

template <class T>
io::Bytes encode_snapshot(const Tensor<T>& t) {
  io::Bytes out(kSnapshotMagic, kSnapshotMagic + 4);
  io::put_le(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) io::put_le(out, static_cast<std::uint64_t>(d));
  for (T v : t.data()) io::put_f32(out, static_cast<float>(v));
  return out;
}

template <class T>
Tensor<T> decode_snapshot(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw TruncatedError("snapshot shorter than its magic");
  if (!std::equal(kSnapshotMagic, kSnapshotMagic + 4, bytes.begin())) throw BadMagicError("not an NDG1 snapshot");
  const auto rank = io::get_le<std::uint32_t>(bytes, 4);
  std::size_t at = 8;
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i, at += 8) shape.push_back(io::get_le<std::uint64_t>(bytes, at));
  const std::size_t n = numel(shape);
  if (bytes.size() - at < 4 * n) throw TruncatedError("snapshot payload truncated");
  if (bytes.size() - at > 4 * n) throw FormatError("snapshot has trailing bytes");
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(io::get_f32(bytes, at + 4 * i));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const std::vector<std::pair<std::string, Tensor<T>>>& params) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (const auto& [name, t] : params) {
    const std::string file = name + ".ndg";
    io::write_file(dir / file, encode_snapshot(t));
    manifest << name << '\t' << file << '\n';
  }
  io::write_text(dir / "manifest.txt", manifest.str());
}

template <class T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::filesystem::path& dir) {
  std::istringstream manifest(io::read_text(dir / "manifest.txt"));
  std::map<std::string, Tensor<T>> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("malformed manifest line: " + line);
    out.emplace(line.substr(0, tab), decode_snapshot<T>(io::read_file(dir / line.substr(tab + 1))));
  }
  return out;
}

}  // namespace cigocc::nd
