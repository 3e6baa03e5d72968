#pragma once

// File formats: binary PNM images, .npy depth arrays, JSONL samples,
// session manifests.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "walkgpt/curation.hpp"
#include "walkgpt/scene.hpp"

namespace walkgpt::io {

namespace fs = std::filesystem;

// 8-bit image, channel-interleaved; 1 (gray) or 3 (RGB) channels.
struct Image {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  std::vector<uint8_t> data;

  Image() = default;
  Image(int r, int c, int ch, uint8_t fill = 0)
      : rows(r), cols(c), channels(ch), data(static_cast<size_t>(r) * c * ch, fill) {}
  uint8_t& at(int r, int c, int ch) { return data[(static_cast<size_t>(r) * cols + c) * channels + ch]; }
  uint8_t at(int r, int c, int ch) const { return data[(static_cast<size_t>(r) * cols + c) * channels + ch]; }
  bool operator==(const Image&) const = default;
};

// P5 (gray) or P6 (RGB), maxval 255.
Image ReadPnm(const fs::path& path);
void WritePnm(const fs::path& path, const Image& image);
Image DecodePnm(const std::string& bytes);
std::string EncodePnm(const Image& image);

// Little-endian float32 or float64, 2-D, C order.
DepthGrid ReadNpy(const fs::path& path);
void WriteNpy(const fs::path& path, const DepthGrid& depth);

// Panoptic masks are stored as RGB images with the class id in channel 0.
ChannelGrid ToChannelGrid(const Image& image);
Image FromChannelGrid(const ChannelGrid& grid);
Image MaskToImage(const curation::BinaryMask& mask);  // 0/255 gray
curation::BinaryMask ImageToMask(const Image& image);
Image LabelsToImage(const LabelGrid& labels);  // gray, class id as value

std::string ReadFile(const fs::path& path);
void WriteFile(const fs::path& path, const std::string& bytes);
std::vector<std::string> ReadLines(const fs::path& path);

// One frame id per non-empty line; '#' lines are comments.
std::vector<std::string> ReadManifest(const fs::path& path);

// Dataset directory layout:
//   samples.jsonl, masks/{sample_id}_{k}.pgm, semantic/{sample_id}.pgm,
//   depth/{sample_id}.npy, images/{sample_id}.ppm
struct DatasetPaths {
  fs::path root;
  fs::path jsonl() const { return root / "samples.jsonl"; }
  fs::path mask(const std::string& ref) const { return root / "masks" / (ref + ".pgm"); }
  fs::path semantic(const std::string& id) const { return root / "semantic" / (id + ".pgm"); }
  fs::path depth(const std::string& id) const { return root / "depth" / (id + ".npy"); }
  fs::path image(const std::string& id) const { return root / "images" / (id + ".ppm"); }
};

// Serializes the fields listed in the sample record; paths are relative to
// the dataset root.
std::string SampleToJsonLine(const curation::VQASample& sample);

// Writes the sample's JSON line (returned) and its mask, semantic, and depth
// files under `paths`.
std::string WriteSampleFiles(const DatasetPaths& paths, const curation::VQASample& sample);

// Rebuilds samples from samples.jsonl and the referenced files.
std::vector<curation::VQASample> LoadDataset(const DatasetPaths& paths,
                                             const curation::AccessibilityOntology& ontology);

}  // namespace walkgpt::io
