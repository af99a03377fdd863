#pragma once

// Checkpoint container shared by model and editor checkpoints.
//
// Byte layout (all integers little-endian):
//
//   offset  size      field
//   0       8         magic "KGEDCKPT"
//   8       4         u32 container version (kContainerVersion)
//   12      8         u64 manifest length L
//   20      L         manifest, UTF-8 JSON text
//   ...     4         u32 array count N
//   N times:
//           4         u32 name length, then the name bytes
//           1         u8 dtype (0 = float64, 1 = float32)
//           4         u32 rank R
//           8*R       u64 dimensions
//           E*w       payload, E = product of dims, w = 8 or 4 bytes, IEEE-754
//   last 8            u64 FNV-1a checksum of every preceding byte
//
// Decoding rejects a bad magic, an unknown version, a checksum mismatch and
// any length field that runs past the end of the buffer.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgedit/tensor.hpp"

namespace kgedit::io {

inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

struct NamedArray {
  std::string name;
  DType dtype = DType::f64;
  ad::Tensor tensor;
};

struct Container {
  std::string manifest;
  std::vector<NamedArray> arrays;
};

std::string encode_container(const Container& container);
Container decode_container(std::string_view bytes);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t state = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace kgedit::io
