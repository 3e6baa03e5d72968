#pragma once

// Parametric street scenes: a ground plane split into walkable and
// non-walkable surfaces, a building/sky backdrop, and a few standing
// objects, with analytic ground-plane depth.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "walkgpt/curation.hpp"
#include "walkgpt/io.hpp"
#include "walkgpt/scene.hpp"

namespace walkgpt::synthetic {

struct SceneSpec {
  int image_size = 64;
  int grid = 16;  // regions are aligned to image_size/grid pixel cells
  int max_objects = 2;
};

struct SyntheticFrame {
  std::string frame_id;
  io::Image rgb;
  ChannelGrid panoptic;  // channel 0 class id, channel 1 instance id
  DepthGrid depth;
};

SyntheticFrame GenerateFrame(uint64_t seed, int index, const SceneSpec& spec = {});

// Writes manifest.txt, images/, masks/ (panoptic PPM) and depth/ (.npy).
void WriteSession(const std::filesystem::path& dir, int num_frames, uint64_t seed, const SceneSpec& spec = {});

struct SyntheticSample {
  curation::VQASample sample;
  io::Image rgb;
};

// Generates frames and curates them with the deterministic question source.
std::vector<SyntheticSample> GenerateSamples(int count, uint64_t seed, const SceneSpec& spec = {});

}  // namespace walkgpt::synthetic
