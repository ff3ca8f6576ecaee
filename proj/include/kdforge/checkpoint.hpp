// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint layout, all integers little-endian:
//   "LBKD" | u32 version | u64 n + n bytes JSON header | u64 tensor count |
//   per tensor: u64 n + name | u32 rank | rank x u64 extent | u8 dtype (0 = f32) | payload
// Optimizer moments are stored as tensors named "optim.m.<param>" and
// "optim.v.<param>".
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdforge/model.hpp"
#include "kdforge/optim.hpp"
#include "kdforge/rng.hpp"

namespace kdforge {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  HeadSet heads;
  std::vector<std::string> vocab;
  EncoderParams<float> params;
  std::optional<AdamWState<float>> optimizer;
  std::map<std::string, Rng::State> rng_states;
  std::uint64_t epoch = 0;
  std::optional<double> best_metric;
  /// Free-form run metadata (task name, hyperparameters).
  nlohmann::json meta = nlohmann::json::object();
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws checkpoint_magic, checkpoint_version or checkpoint_truncated errors
/// for the corresponding corruptions.
Checkpoint deserialize_checkpoint(const std::string& bytes);

/// Writes through a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace kdforge
