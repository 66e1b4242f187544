#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace ur3::nn {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// FNV-1a 64-bit hash of the canonical JSON dump, as hex.
std::string config_hash(const nlohmann::json& config);

struct CheckpointHeader {
  std::string kind;  // "restorer", "codec_encoder", ...
  nlohmann::json config;
  std::string arch_hash;
  int64_t iteration = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// Writes module weights plus a JSON header into one archive file.
void save_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                     const CheckpointHeader& header);

/// Reads only the header.
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

/// Loads weights into `module` after checking kind and architecture hash.
CheckpointHeader load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                                 const std::string& expected_kind);

}  // namespace ur3::nn
