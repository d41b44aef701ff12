#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"
#include "mmk/model.hpp"

namespace mmk {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout, little endian:
//   "MMKS" | u32 version | u64 header bytes | JSON header | u32 tensor count |
//   per tensor: u32 name bytes, name, u32 rank, u32 dims[rank], f32 data
// Parameters are stored in name order, so equal params give equal bytes.
struct Checkpoint {
  ModelConfig config;
  std::uint64_t vocab_fingerprint = 0;
  std::uint64_t step = 0;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();
  ParamMap params;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
// SchemaError on bad magic, truncation or inconsistent params; a different
// format version is refused outright.
Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string fingerprint_hex(std::uint64_t fp);

}  // namespace mmk
