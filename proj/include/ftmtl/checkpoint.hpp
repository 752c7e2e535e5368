#pragma once

#include <map>
#include <memory>
#include <string>

#include "ftmtl/model.hpp"

namespace ftmtl {

// Checkpoint layout (all integers little-endian):
//   8-byte magic "FTMTLCKP", u32 version,
//   u32 tensor count, per tensor: u16 name length + name, u8 dtype (0 = f32),
//   u8 rank, u32 dims..., u64 offset into the data block,
//   u64 data block size, raw f32 data,
//   u64 config length, UTF-8 "key = value" lines (model config, training
//   phase marker, rng state, and any caller-provided snapshot entries).

inline constexpr std::uint32_t kCheckpointVersion = 1;

using MetaMap = std::map<std::string, std::string>;

void save_checkpoint(const MtlModel<float>& model, const MetaMap& extra_meta, const std::string& path);

/// Rebuilds the model from the embedded config and fills its parameters.
std::unique_ptr<MtlModel<float>> load_checkpoint(const std::string& path, MetaMap* meta = nullptr);

MetaMap model_config_meta(const ModelConfig& cfg);
ModelConfig model_config_from_meta(const MetaMap& meta);

}  // namespace ftmtl
