#pragma once

// Versioned single-file container for model weights, configuration,
// vocabulary, and optimizer state.
//
//   "WGPTCKPT" | u32 version | u64 header length | JSON header | float64 data
//
// The header lists every array as {name, rows, cols} in storage order.

#include <filesystem>
#include <memory>

#include "walkgpt/model.hpp"

namespace walkgpt::checkpoint {

inline constexpr uint32_t kVersion = 1;

struct Loaded {
  std::unique_ptr<model::WalkGptModel> model;
  model::TrainState state;
};

void Save(const std::filesystem::path& path, const model::WalkGptModel& model, const model::TrainState& state);
Loaded Load(const std::filesystem::path& path);

}  // namespace walkgpt::checkpoint
