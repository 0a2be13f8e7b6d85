#pragma once

// Binary checkpoint container, little-endian:
//
//   magic      8 bytes  "DIFFEXCK"
//   version    u32      kCheckpointVersion
//   stage      u32 length + bytes          ("classifier", "sdae", "directions")
//   config     u64      hash of the config sections the stage depends on
//   metadata   u32 count, then (u32 len + key bytes, u32 len + value bytes)*
//   tensors    u32 count, then (u32 len + name, u32 rows, u32 cols,
//                                rows*cols f32 column-major)*
//   checksum   u64      FNV-1a of every preceding byte
//
// Metadata never contains timestamps, so identical inputs give identical
// files.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "diffex/autodiff.hpp"

namespace diffex {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string stage;
  std::uint64_t config_hash = 0;
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Mat<float>>> tensors;

  /// Tensors whose names start with `prefix` (prefix stripped).
  std::vector<std::pair<std::string, Mat<float>>> group(const std::string& prefix) const;
  const std::string& meta(const std::string& key) const;
};

std::uint64_t fnv1a(const void* data, std::size_t bytes,
                    std::uint64_t h = 1469598103934665603ULL);
std::uint64_t fnv1a(const std::string& s);
std::uint64_t file_hash(const std::filesystem::path& path);

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& origin);

/// Writes via a temporary sibling and rename, so the final name never
/// holds a partial file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Loads and verifies magic, version, checksum, and stage tag.  When
/// `expected_hash` is non-zero it must match the stored config hash.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_stage,
                           std::uint64_t expected_hash = 0);

/// Atomic text/binary write helper shared by reports.
void atomic_write(const std::filesystem::path& path, const std::string& contents);

}  // namespace diffex
