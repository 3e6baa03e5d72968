#include "walkgpt/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "walkgpt/errors.hpp"
#include "walkgpt/tensor.hpp"

namespace walkgpt::synthetic {
namespace {

constexpr int kSky = 27;
constexpr int kBuilding = 7;
constexpr std::array<int, 4> kWalkable = {3, 5, 6, 30};   // sidewalk, crosswalk, paved trail, terrain
constexpr std::array<int, 2> kRoadLike = {1, 19};         // road, railway track
constexpr std::array<int, 8> kObjects = {24, 21, 12, 20, 28, 15, 26, 25};

// Golden-ratio hue steps with alternating brightness keep every class at
// least 16 RGB units from every other, well above the pixel noise.
std::array<uint8_t, 3> ClassColor(int class_id) {
  const double h = std::fmod(class_id * 0.618033988749895, 1.0) * 6.0;
  const double s = 0.7;
  const double v = class_id % 2 ? 0.55 : 0.85;
  const int sector = static_cast<int>(h);
  const double f = h - sector;
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  double rgb[3];
  switch (sector % 6) {
    case 0: rgb[0] = v, rgb[1] = t, rgb[2] = p; break;
    case 1: rgb[0] = q, rgb[1] = v, rgb[2] = p; break;
    case 2: rgb[0] = p, rgb[1] = v, rgb[2] = t; break;
    case 3: rgb[0] = p, rgb[1] = q, rgb[2] = v; break;
    case 4: rgb[0] = t, rgb[1] = p, rgb[2] = v; break;
    default: rgb[0] = v, rgb[1] = p, rgb[2] = q; break;
  }
  std::array<uint8_t, 3> out;
  for (int c = 0; c < 3; ++c) out[static_cast<size_t>(c)] = static_cast<uint8_t>(std::lround(40.0 + 175.0 * rgb[c]));
  return out;
}

}  // namespace

SyntheticFrame GenerateFrame(uint64_t seed, int index, const SceneSpec& spec) {
  if (spec.grid < 4 || spec.image_size % spec.grid != 0) throw BadImageShape("image size must be a multiple of grid");
  ad::Rng rng(seed * 1000003ULL + static_cast<uint64_t>(index));
  const int g = spec.grid;
  const int cell = spec.image_size / g;
  const int horizon = std::max(2, g * 3 / 8 + rng.UniformInt(-1, 1));  // first ground cell row
  const int sky_rows = std::max(1, horizon / 2);

  LabelGrid cells(g, g);
  Grid<int> instance(g, g);
  const int walk = kWalkable[static_cast<size_t>(rng.UniformInt(0, kWalkable.size() - 1))];
  const int road = kRoadLike[static_cast<size_t>(rng.UniformInt(0, kRoadLike.size() - 1))];
  const int split = rng.UniformInt(g / 4, 3 * g / 4);
  const bool walk_left = rng.Uniform() < 0.5;
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      if (r < sky_rows) {
        cells.at(r, c) = kSky;
      } else if (r < horizon) {
        cells.at(r, c) = kBuilding;
      } else {
        cells.at(r, c) = ((c < split) == walk_left) ? walk : road;
      }
    }
  }

  // Standing objects: rectangles resting on the ground, each a distinct class.
  std::vector<int> pool(kObjects.begin(), kObjects.end());
  const int n_objects = rng.UniformInt(1, std::max(1, spec.max_objects));
  std::vector<int> bottoms;
  for (int k = 0; k < n_objects; ++k) {
    const int pick = rng.UniformInt(0, static_cast<int>(pool.size()) - 1);
    const int cls = pool[static_cast<size_t>(pick)];
    pool.erase(pool.begin() + pick);
    const int h = rng.UniformInt(2, std::max(2, g / 3));
    const int w = rng.UniformInt(2, std::max(2, g / 4));
    const int bottom = rng.UniformInt(horizon + 2, g - 1);
    const int left = rng.UniformInt(0, g - w);
    for (int r = std::max(0, bottom - h + 1); r <= bottom; ++r) {
      for (int c = left; c < left + w; ++c) {
        cells.at(r, c) = cls;
        instance.at(r, c) = k + 1;
      }
    }
    bottoms.push_back(bottom);
  }

  SyntheticFrame f;
  std::ostringstream id;
  id << "frame" << std::setw(4) << std::setfill('0') << index;
  f.frame_id = id.str();
  const int n = spec.image_size;
  f.rgb = io::Image(n, n, 3);
  f.panoptic = ChannelGrid(n, n, 3);
  f.depth = DepthGrid(n, n);
  const double horizon_px = horizon * cell;
  const double focal = 0.5 * n;
  const double cam_height = 1.5;
  auto ground_depth = [&](double y) { return cam_height * focal / (y + 0.5 - horizon_px + 0.5); };
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const int r = y / cell;
      const int c = x / cell;
      const int cls = cells.at(r, c);
      f.panoptic.at(y, x, 0) = cls;
      f.panoptic.at(y, x, 1) = instance.at(r, c);
      const std::array<uint8_t, 3> base = ClassColor(cls);
      for (int ch = 0; ch < 3; ++ch) {
        const int noisy = base[static_cast<size_t>(ch)] + rng.UniformInt(-6, 6);
        f.rgb.at(y, x, ch) = static_cast<uint8_t>(std::clamp(noisy, 0, 255));
      }
      double d;
      if (cls == kSky) {
        d = 0.0;  // no return from the sky
      } else if (cls == kBuilding) {
        d = 40.0 + 0.05 * x;
      } else if (instance.at(r, c) > 0) {
        const int bottom_px = (bottoms[static_cast<size_t>(instance.at(r, c) - 1)] + 1) * cell - 1;
        d = ground_depth(bottom_px) + 0.01 * (bottom_px - y);
      } else {
        d = ground_depth(y);
      }
      f.depth.at(y, x) = d;
    }
  }
  return f;
}

void WriteSession(const std::filesystem::path& dir, int num_frames, uint64_t seed, const SceneSpec& spec) {
  std::string manifest;
  for (int i = 0; i < num_frames; ++i) {
    const SyntheticFrame f = GenerateFrame(seed, i, spec);
    io::WritePnm(dir / "images" / (f.frame_id + ".ppm"), f.rgb);
    io::WritePnm(dir / "masks" / (f.frame_id + ".ppm"), io::FromChannelGrid(f.panoptic));
    io::WriteNpy(dir / "depth" / (f.frame_id + ".npy"), f.depth);
    manifest += f.frame_id + "\n";
  }
  io::WriteFile(dir / "manifest.txt", manifest);
}

std::vector<SyntheticSample> GenerateSamples(int count, uint64_t seed, const SceneSpec& spec) {
  const curation::AccessibilityOntology ontology = curation::AccessibilityOntology::Default();
  curation::TemplateQuestionSource questions;
  std::vector<SyntheticSample> out;
  for (int i = 0; i < count; ++i) {
    SyntheticFrame f = GenerateFrame(seed, i, spec);
    curation::BuildOptions opts;
    opts.sample_id = f.frame_id;
    opts.image_ref = "images/" + f.frame_id + ".ppm";
    SyntheticSample s{curation::BuildSample(f.panoptic, f.depth, opts, ontology, questions), std::move(f.rgb)};
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace walkgpt::synthetic
