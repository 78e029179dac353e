#pragma once

#include <string>

#include <json.hpp>
#include <torch/torch.h>

#include "tlg/config.hpp"

namespace tlg {

// Single file: a length-prefixed JSON header (model hash, config, tensor table) followed by raw
// little-endian tensor bytes. Parameters and buffers round-trip bit-exactly.
void save_checkpoint(const torch::nn::Module& model, const Config& cfg, const std::string& path,
                     const nlohmann::json& extra = nlohmann::json::object());

struct CheckpointInfo {
  std::string model_hash;
  Config config;
  nlohmann::json header;
};

CheckpointInfo read_checkpoint_info(const std::string& path);

// Refuses (ConfigError) when the stored model hash differs from model_hash(cfg); LoadError on
// missing/corrupt files or tensor-table mismatches.
CheckpointInfo load_checkpoint(torch::nn::Module& model, const Config& cfg, const std::string& path);

}  // namespace tlg
