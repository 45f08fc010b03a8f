#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cpvt/model.hpp"
#include "cpvt/tensor.hpp"

namespace cpvt {

// On-disk layout (all integers little-endian):
//   magic "CPVTCKPT" | u32 version | u64 length + canonical config text |
//   u32 tensor count | per tensor: u32 name length, name, u8 precision
//   (0=f32, 1=f64), u32 rank, u64 dims | payloads in table order (f32 as
//   4-byte IEEE floats, f64 as 8-byte doubles) | u64 FNV-1a digest of every
//   preceding byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Parsed, digest-verified file contents.
struct Checkpoint {
  std::uint32_t version = 0;
  std::map<std::string, std::string> config;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::uint64_t digest = 0;
};

void save_checkpoint(const Model& m, const std::string& path);

// Verifies magic, version, and digest, then parses. Throws VersionError on a
// version mismatch and CorruptionError on anything malformed.
Checkpoint read_checkpoint(const std::string& path);

// read_checkpoint + rebuild: the stored config reconstructs the architecture
// and every parameter is overwritten from the file.
Model load_checkpoint(const std::string& path);

// FNV-1a digest over the names, shapes, and payload bytes of every
// parameter; detects any parameter mutation.
std::uint64_t param_checksum(const Model& m);

}  // namespace cpvt
