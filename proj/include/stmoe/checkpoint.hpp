// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//   line 1  "STMOE1"
//   line 2  manifest length in bytes (decimal)
//   JSON manifest (config, tensor table, step, seed, vocab)
//   little-endian float32 payload, tensors back to back at the listed offsets
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "stmoe/model.hpp"
#include "stmoe/vocab.hpp"

namespace stmoe {

inline constexpr const char* kCheckpointVersion = "STMOE1";

struct Checkpoint {
  Model model;
  Vocab vocab;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab, std::int64_t step = 0,
                     std::uint64_t seed = 0);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stmoe
