#pragma once

// Portable tensor file:
//   "PTNSR1"            6 bytes magic
//   u32 rank            little-endian
//   u32 dims[rank]      little-endian
//   f32 payload         row-major, little-endian IEEE-754

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "patchtl/error.hpp"
#include "patchtl/tensor.hpp"

namespace patchtl {

inline constexpr std::array<char, 6> kTensorMagic{'P', 'T', 'N', 'S', 'R', '1'};
inline constexpr std::uint32_t kMaxTensorDim = 1u << 24;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

/// Serialize to the portable byte layout. Rank must be 2 or 3.
inline std::string encode_tensor(const Tensor& t) {
  if (t.rank() < 2 || t.rank() > 3)
    throw FormatError("portable tensors have rank 2 or 3, got rank " + std::to_string(t.rank()));
  std::string out(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) {
    if (d == 0 || d > kMaxTensorDim) throw FormatError("tensor dim out of range: " + std::to_string(d));
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + 4 * t.size());
  for (float f : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline Tensor decode_tensor(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kTensorMagic.size() + 4 ||
      std::memcmp(bytes.data(), kTensorMagic.data(), kTensorMagic.size()) != 0)
    throw FormatError("bad magic bytes");
  std::size_t off = kTensorMagic.size();
  const std::uint32_t rank = detail::get_u32(p + off);
  off += 4;
  if (rank < 2 || rank > 3) throw FormatError("unsupported rank " + std::to_string(rank));
  if (bytes.size() < off + 4 * rank) throw FormatError("truncated header");
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::get_u32(p + off);
    off += 4;
    if (d == 0 || d > kMaxTensorDim) throw FormatError("bad dim " + std::to_string(d));
  }
  const std::size_t n = shape_size(shape);
  if (bytes.size() - off < 4 * n)
    throw IoError("truncated payload: expected " + std::to_string(4 * n) + " bytes, have " +
                  std::to_string(bytes.size() - off));
  if (bytes.size() - off > 4 * n) throw FormatError("trailing bytes after payload");
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i, off += 4) data[i] = std::bit_cast<float>(detail::get_u32(p + off));
  return Tensor(std::move(shape), std::move(data));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  const std::string bytes = encode_tensor(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_tensor(bytes);
  } catch (const Error& e) {
    if (dynamic_cast<const IoError*>(&e)) throw IoError(path.string() + ": " + e.what());
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace patchtl
