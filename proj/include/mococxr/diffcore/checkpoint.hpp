#pragma once

// Binary checkpoint container. Byte layout (all integers little-endian):
//
//   magic           8 bytes  "MCXRCKPT"
//   format_version  u32      kCheckpointFormatVersion
//   header_bytes    u32      length of the header text that follows
//   header          UTF-8    "key=value\n" lines, keys in ascending order
//   param_count     u32
//   per parameter, in ParamSet order:
//     name_len u32, name bytes, ndim u32, dims u64[ndim], count u64,
//     count x IEEE-754 binary32 values
//
// See docs/checkpoint_format.md for the header keys written by each command.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "mococxr/diffcore/encoder.hpp"

namespace mococxr::diffcore {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct Checkpoint {
  std::uint32_t format_version = kCheckpointFormatVersion;
  std::map<std::string, std::string> header;
  ParamSet params;

  const std::string& field(const std::string& key) const;
  std::string field_or(const std::string& key, const std::string& fallback) const;

  // Stores spec fields under "encoder.<name>".
  void set_encoder(const EncoderSpec& spec);
  EncoderSpec encoder() const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

// Writes through a temporary file and renames it into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace mococxr::diffcore
