#include "walkgpt/checkpoint.hpp"

#include <cstring>
#include <json.hpp>

#include "walkgpt/errors.hpp"
#include "walkgpt/io.hpp"

namespace walkgpt::checkpoint {

using nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'W', 'G', 'P', 'T', 'C', 'K', 'P', 'T'};

template <typename T>
void PutRaw(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T GetRaw(const std::string& in, size_t& pos) {
  if (in.size() - pos < sizeof(T)) throw IoError("truncated checkpoint");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void Save(const std::filesystem::path& path, const model::WalkGptModel& m, const model::TrainState& state) {
  std::vector<std::pair<std::string, const model::Matrix*>> arrays;
  arrays.emplace_back("encoder.weight", &m.encoder().weight());
  arrays.emplace_back("encoder.bias", &m.encoder().bias());
  const auto& entries = m.params().entries();
  for (const auto& [name, v] : entries) arrays.emplace_back(name, &v.value());
  const model::AdamW& opt = state.optimizer;
  for (size_t i = 0; i < opt.m.size() && i < entries.size(); ++i) {
    if (opt.m[i].size() == 0) continue;
    arrays.emplace_back("optim.m." + entries[i].first, &opt.m[i]);
    arrays.emplace_back("optim.v." + entries[i].first, &opt.v[i]);
  }

  ordered_json header;
  header["config"] = ordered_json::parse(m.config().ToJson());
  header["vocab"] = m.vocab().tokens();
  header["train_step"] = state.step;
  header["optimizer_step"] = opt.step;
  ordered_json index = ordered_json::array();
  for (const auto& [name, mat] : arrays) index.push_back({{"name", name}, {"rows", mat->rows()}, {"cols", mat->cols()}});
  header["arrays"] = index;
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  PutRaw(out, kVersion);
  PutRaw(out, static_cast<uint64_t>(header_text.size()));
  out += header_text;
  for (const auto& [name, mat] : arrays) {
    out.append(reinterpret_cast<const char*>(mat->data()), static_cast<size_t>(mat->size()) * sizeof(double));
  }
  io::WriteFile(path, out);
}

Loaded Load(const std::filesystem::path& path) {
  const std::string bytes = io::ReadFile(path);
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError(path.string() + " is not a checkpoint");
  }
  size_t pos = sizeof(kMagic);
  const uint32_t version = GetRaw<uint32_t>(bytes, pos);
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const uint64_t header_len = GetRaw<uint64_t>(bytes, pos);
  if (bytes.size() - pos < header_len) throw IoError("truncated checkpoint header");
  const ordered_json header = ordered_json::parse(bytes.substr(pos, header_len));
  pos += header_len;

  model::ModelConfig cfg = model::ModelConfig::FromJson(header.at("config").dump());
  Vocabulary vocab = Vocabulary::FromTokens(header.at("vocab").get<std::vector<std::string>>());
  Loaded out;
  out.model = std::make_unique<model::WalkGptModel>(cfg, std::move(vocab));
  out.state.optimizer = model::AdamW::FromConfig(cfg);
  out.state.step = header.at("train_step").get<long>();
  out.state.optimizer.step = header.at("optimizer_step").get<long>();

  auto& entries = out.model->params().entries();
  std::map<std::string, size_t> slot;
  for (size_t i = 0; i < entries.size(); ++i) slot[entries[i].first] = i;
  std::vector<bool> seen(entries.size(), false);

  for (const auto& a : header.at("arrays")) {
    const std::string name = a.at("name").get<std::string>();
    const auto rows = a.at("rows").get<Eigen::Index>();
    const auto cols = a.at("cols").get<Eigen::Index>();
    const size_t n = static_cast<size_t>(rows * cols) * sizeof(double);
    if (bytes.size() - pos < n) throw IoError("truncated checkpoint data at " + name);
    model::Matrix mat(rows, cols);
    std::memcpy(mat.data(), bytes.data() + pos, n);
    pos += n;

    auto assign = [&](model::Matrix& dst) {
      if (dst.rows() != rows || dst.cols() != cols) throw ShapeMismatch("checkpoint array " + name + " has wrong shape");
      dst = mat;
    };
    if (name == "encoder.weight") {
      assign(out.model->encoder().weight());
    } else if (name == "encoder.bias") {
      assign(out.model->encoder().bias());
    } else if (name.rfind("optim.", 0) == 0) {
      const bool first = name.compare(0, 8, "optim.m.") == 0;
      const std::string pname = name.substr(8);
      auto it = slot.find(pname);
      if (it == slot.end()) throw IoError("optimizer state for unknown parameter " + pname);
      auto& vec = first ? out.state.optimizer.m : out.state.optimizer.v;
      if (vec.size() != entries.size()) vec.assign(entries.size(), model::Matrix());
      vec[it->second] = mat;
    } else {
      auto it = slot.find(name);
      if (it == slot.end()) throw IoError("unknown checkpoint array " + name);
      assign(entries[it->second].second.mutable_value());
      seen[it->second] = true;
    }
  }
  for (size_t i = 0; i < entries.size(); ++i) {
    if (!seen[i]) throw IoError("checkpoint lacks parameter " + entries[i].first);
  }
  return out;
}

}  // namespace walkgpt::checkpoint
