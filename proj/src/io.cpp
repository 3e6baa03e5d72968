#include "walkgpt/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "walkgpt/errors.hpp"

namespace walkgpt::io {

using nlohmann::ordered_json;

std::string ReadFile(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void WriteFile(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<std::string> ReadLines(const fs::path& path) {
  std::istringstream in(ReadFile(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<std::string> ReadManifest(const fs::path& path) {
  std::vector<std::string> ids;
  for (std::string line : ReadLines(path)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    size_t start = 0;
    while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start]))) ++start;
    line = line.substr(start);
    if (line.empty() || line[0] == '#') continue;
    ids.push_back(line);
  }
  return ids;
}

namespace {

// Reads the next whitespace-delimited header field, skipping comments.
int NextHeaderInt(const std::string& bytes, size_t& pos) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  size_t start = pos;
  while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
  if (start == pos) throw IoError("malformed PNM header");
  return std::stoi(bytes.substr(start, pos - start));
}

}  // namespace

Image DecodePnm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw IoError("only binary P5/P6 images are supported");
  }
  const int channels = bytes[1] == '6' ? 3 : 1;
  size_t pos = 2;
  const int cols = NextHeaderInt(bytes, pos);
  const int rows = NextHeaderInt(bytes, pos);
  const int maxval = NextHeaderInt(bytes, pos);
  if (maxval != 255) throw IoError("PNM maxval must be 255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw IoError("malformed PNM header");
  ++pos;
  Image img(rows, cols, channels);
  if (bytes.size() - pos < img.data.size()) throw IoError("truncated PNM pixel data");
  std::memcpy(img.data.data(), bytes.data() + pos, img.data.size());
  return img;
}

std::string EncodePnm(const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw IoError("PNM needs 1 or 3 channels");
  std::string out = (image.channels == 3 ? "P6\n" : "P5\n") + std::to_string(image.cols) + " " +
                    std::to_string(image.rows) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.data.data()), image.data.size());
  return out;
}

Image ReadPnm(const fs::path& path) { return DecodePnm(ReadFile(path)); }
void WritePnm(const fs::path& path, const Image& image) { WriteFile(path, EncodePnm(image)); }

DepthGrid ReadNpy(const fs::path& path) {
  static_assert(std::endian::native == std::endian::little, "npy reader assumes a little-endian host");
  const std::string bytes = ReadFile(path);
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw IoError("not an npy file: " + path.string());
  const int major = static_cast<unsigned char>(bytes[6]);
  size_t header_len = 0;
  size_t offset = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<size_t>(static_cast<unsigned char>(bytes[9])) << 8);
    offset = 10;
  } else {
    if (bytes.size() < 12) throw IoError("truncated npy header");
    for (int i = 0; i < 4; ++i) header_len |= static_cast<size_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    offset = 12;
  }
  const std::string header = bytes.substr(offset, header_len);
  offset += header_len;
  size_t elem = 0;
  if (header.find("'<f8'") != std::string::npos) {
    elem = 8;
  } else if (header.find("'<f4'") != std::string::npos) {
    elem = 4;
  } else {
    throw IoError("npy dtype must be <f4 or <f8");
  }
  if (header.find("'fortran_order': False") == std::string::npos) throw IoError("npy must be C-ordered");
  const size_t lp = header.find("'shape': (");
  if (lp == std::string::npos) throw IoError("npy header lacks shape");
  int rows = 0;
  int cols = 0;
  if (std::sscanf(header.c_str() + lp + 10, "%d, %d", &rows, &cols) != 2) throw IoError("npy must be 2-D");
  DepthGrid grid(rows, cols);
  if (bytes.size() - offset < grid.data.size() * elem) throw IoError("truncated npy data");
  const char* p = bytes.data() + offset;
  for (size_t i = 0; i < grid.data.size(); ++i) {
    if (elem == 8) {
      double v;
      std::memcpy(&v, p + i * 8, 8);
      grid.data[i] = v;
    } else {
      float v;
      std::memcpy(&v, p + i * 4, 4);
      grid.data[i] = v;
    }
  }
  return grid;
}

void WriteNpy(const fs::path& path, const DepthGrid& depth) {
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + std::to_string(depth.rows) + ", " +
                       std::to_string(depth.cols) + "), }";
  const size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::string out = "\x93NUMPY";
  out.push_back(1);
  out.push_back(0);
  out.push_back(static_cast<char>(header.size() & 0xff));
  out.push_back(static_cast<char>(header.size() >> 8));
  out += header;
  out.append(reinterpret_cast<const char*>(depth.data.data()), depth.data.size() * sizeof(double));
  WriteFile(path, out);
}

ChannelGrid ToChannelGrid(const Image& image) {
  ChannelGrid g(image.rows, image.cols, image.channels);
  for (size_t i = 0; i < image.data.size(); ++i) g.data[i] = image.data[i];
  return g;
}

Image FromChannelGrid(const ChannelGrid& grid) {
  Image img(grid.rows, grid.cols, grid.channels);
  for (size_t i = 0; i < grid.data.size(); ++i) img.data[i] = static_cast<uint8_t>(std::clamp(grid.data[i], 0, 255));
  return img;
}

Image MaskToImage(const curation::BinaryMask& mask) {
  Image img(mask.rows, mask.cols, 1);
  for (size_t i = 0; i < mask.data.size(); ++i) img.data[i] = mask.data[i] ? 255 : 0;
  return img;
}

curation::BinaryMask ImageToMask(const Image& image) {
  if (image.channels != 1) throw BadMaskShape("binary masks must be single-channel");
  curation::BinaryMask m(image.rows, image.cols);
  for (size_t i = 0; i < image.data.size(); ++i) m.data[i] = image.data[i] >= 128 ? 1 : 0;
  return m;
}

Image LabelsToImage(const LabelGrid& labels) {
  Image img(labels.rows, labels.cols, 1);
  for (size_t i = 0; i < labels.data.size(); ++i) img.data[i] = static_cast<uint8_t>(std::clamp(labels.data[i], 0, 255));
  return img;
}

std::string SampleToJsonLine(const curation::VQASample& sample) {
  ordered_json j;
  j["sample_id"] = sample.sample_id;
  j["image"] = sample.image_ref;
  j["semantic_mask"] = "semantic/" + sample.sample_id + ".pgm";
  j["depth"] = "depth/" + sample.sample_id + ".npy";
  j["question"] = sample.question;
  j["answer"] = sample.answer;
  ordered_json objects = ordered_json::array();
  for (const curation::ObjectRecord& o : sample.objects) {
    ordered_json obj;
    obj["name"] = o.name;
    obj["class_id"] = o.class_id;
    obj["accessibility"] = ToString(o.accessibility);
    obj["distance_m"] = o.distance_m ? ordered_json(*o.distance_m) : ordered_json(nullptr);
    objects.push_back(obj);
  }
  j["objects"] = objects;
  j["split"] = sample.split;
  return j.dump();
}

std::string WriteSampleFiles(const DatasetPaths& paths, const curation::VQASample& sample) {
  for (size_t k = 0; k < sample.masks.size(); ++k) WritePnm(paths.mask(sample.mask_refs[k]), MaskToImage(sample.masks[k]));
  WritePnm(paths.semantic(sample.sample_id), LabelsToImage(sample.annotation.semantic_mask));
  WriteNpy(paths.depth(sample.sample_id), sample.annotation.depth_map);
  return SampleToJsonLine(sample);
}

std::vector<curation::VQASample> LoadDataset(const DatasetPaths& paths,
                                             const curation::AccessibilityOntology& ontology) {
  std::vector<curation::VQASample> out;
  int line_no = 0;
  for (const std::string& line : ReadLines(paths.jsonl())) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw IoError("samples.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    curation::VQASample s;
    s.sample_id = j.at("sample_id").get<std::string>();
    s.image_ref = j.at("image").get<std::string>();
    s.question = j.at("question").get<std::string>();
    s.answer = j.at("answer").get<std::string>();
    s.split = j.value("split", std::string("train"));
    const Image sem = ReadPnm(paths.root / j.at("semantic_mask").get<std::string>());
    LabelGrid labels(sem.rows, sem.cols);
    for (size_t i = 0; i < labels.data.size(); ++i) labels.data[i] = sem.data[i * static_cast<size_t>(sem.channels)];
    DepthGrid depth = ReadNpy(paths.root / j.at("depth").get<std::string>());
    s.annotation = BuildAnnotation(s.sample_id, s.image_ref, std::move(labels), std::move(depth), ontology);
    for (const auto& o : j.at("objects")) {
      curation::ObjectRecord rec;
      rec.name = o.at("name").get<std::string>();
      rec.class_id = o.at("class_id").get<int>();
      rec.accessibility = o.at("accessibility").get<std::string>() == "accessible" ? Accessibility::kAccessible
                                                                                   : Accessibility::kHarmful;
      if (!o.at("distance_m").is_null()) rec.distance_m = o.at("distance_m").get<double>();
      const std::string ref = s.sample_id + "_" + std::to_string(s.objects.size());
      s.mask_refs.push_back(ref);
      s.masks.push_back(ImageToMask(ReadPnm(paths.mask(ref))));
      s.objects.push_back(std::move(rec));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace walkgpt::io
