#include "walkgpt/curation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "walkgpt/errors.hpp"

namespace walkgpt::curation {

using grammar::NormalizeName;
using json = nlohmann::json;

namespace {

const char* LabelName(OntologyLabel l) {
  switch (l) {
    case OntologyLabel::kAccessible: return "accessible";
    case OntologyLabel::kHarmful: return "harmful";
    case OntologyLabel::kIgnore: return "ignore";
  }
  return "ignore";
}

OntologyLabel ParseLabel(const std::string& s) {
  if (s == "accessible") return OntologyLabel::kAccessible;
  if (s == "harmful") return OntologyLabel::kHarmful;
  if (s == "ignore") return OntologyLabel::kIgnore;
  throw InvariantViolation("unknown accessibility label \"" + s + "\"");
}

std::string ExtractAssessment(const std::string& answer) {
  const size_t open = answer.find(grammar::kAssessmentOpen);
  const size_t close = answer.find(grammar::kAssessmentClose);
  if (open == std::string::npos || close == std::string::npos || close < open) return {};
  std::string body = answer.substr(open + grammar::kAssessmentOpen.size(),
                                   close - open - grammar::kAssessmentOpen.size());
  const size_t b = body.find_first_not_of(" \t\r\n");
  const size_t e = body.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string{} : body.substr(b, e - b + 1);
}

}  // namespace

AccessibilityOntology AccessibilityOntology::Default() {
  using L = OntologyLabel;
  static const std::array<std::pair<const char*, OntologyLabel>, kNumClassIds> kTable = {{
      {"unlabeled", L::kIgnore},
      {"road", L::kHarmful},
      {"curb", L::kHarmful},
      {"sidewalk", L::kAccessible},
      {"guard rail", L::kHarmful},
      {"crosswalk", L::kAccessible},
      {"paved trail", L::kAccessible},
      {"building", L::kIgnore},
      {"wall", L::kHarmful},
      {"hand rail", L::kAccessible},
      {"door", L::kAccessible},
      {"gate", L::kAccessible},
      {"pedestrian", L::kHarmful},
      {"rider", L::kHarmful},
      {"animal", L::kHarmful},
      {"stairs", L::kHarmful},
      {"water body", L::kHarmful},
      {"other walkable surface", L::kAccessible},
      {"inaccessible surface", L::kHarmful},
      {"railway track", L::kHarmful},
      {"obstacle", L::kHarmful},
      {"vehicle", L::kHarmful},
      {"traffic sign", L::kIgnore},
      {"traffic light", L::kIgnore},
      {"pole", L::kHarmful},
      {"bus stop", L::kAccessible},
      {"bike rack", L::kHarmful},
      {"sky", L::kIgnore},
      {"tree", L::kHarmful},
      {"vegetation", L::kIgnore},
      {"terrain", L::kAccessible},
  }};
  AccessibilityOntology o;
  for (size_t i = 0; i < kTable.size(); ++i) {
    o.class_names[i] = kTable[i].first;
    o.labels[i] = kTable[i].second;
  }
  return o;
}

AccessibilityOntology AccessibilityOntology::FromJsonText(std::string_view text) {
  AccessibilityOntology o;
  o.labels.fill(OntologyLabel::kIgnore);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw InvariantViolation(std::string("ontology is not valid JSON: ") + e.what());
  }
  for (const json& entry : doc.at("classes")) {
    const int id = entry.at("id").get<int>();
    if (id < 0 || id > kMaxClassId) throw InvariantViolation("ontology class id out of range: " + std::to_string(id));
    o.class_names[static_cast<size_t>(id)] = entry.at("name").get<std::string>();
    o.labels[static_cast<size_t>(id)] = ParseLabel(entry.at("label").get<std::string>());
  }
  o.Validate();
  return o;
}

std::string AccessibilityOntology::ToJsonText() const {
  json classes = json::array();
  for (int id = 0; id < kNumClassIds; ++id) {
    classes.push_back({{"id", id},
                       {"name", class_names[static_cast<size_t>(id)]},
                       {"label", LabelName(labels[static_cast<size_t>(id)])}});
  }
  return json{{"classes", classes}}.dump(2);
}

void AccessibilityOntology::Validate() const {
  if (labels[0] != OntologyLabel::kIgnore) throw InvariantViolation("class 0 must be ignore (background)");
  std::set<std::string> seen;
  for (int id = 1; id < kNumClassIds; ++id) {
    if (IsIgnored(id)) continue;
    const std::string key = NormalizeName(class_names[static_cast<size_t>(id)]);
    if (key.empty()) throw InvariantViolation("class " + std::to_string(id) + " has no name");
    if (!seen.insert(key).second) throw InvariantViolation("duplicate class name " + key);
  }
}

std::optional<Accessibility> AccessibilityOntology::AccessibilityOf(int class_id) const {
  switch (labels.at(static_cast<size_t>(class_id))) {
    case OntologyLabel::kAccessible: return Accessibility::kAccessible;
    case OntologyLabel::kHarmful: return Accessibility::kHarmful;
    case OntologyLabel::kIgnore: return std::nullopt;
  }
  return std::nullopt;
}

std::optional<int> AccessibilityOntology::FindClass(std::string_view name) const {
  const std::string key = NormalizeName(name);
  for (int id = 0; id < kNumClassIds; ++id) {
    if (NormalizeName(class_names[static_cast<size_t>(id)]) == key) return id;
  }
  return std::nullopt;
}

LabelGrid PanopticToSemantic(const ChannelGrid& mask3) {
  if (mask3.channels != 3) {
    throw BadMaskShape("panoptic mask needs 3 channels, got " + std::to_string(mask3.channels));
  }
  if (mask3.data.size() != static_cast<size_t>(mask3.rows) * mask3.cols * 3) {
    throw BadMaskShape("panoptic mask buffer does not match its shape");
  }
  LabelGrid out(mask3.rows, mask3.cols);
  for (int r = 0; r < mask3.rows; ++r) {
    for (int c = 0; c < mask3.cols; ++c) out.at(r, c) = std::clamp(mask3.at(r, c, 0), 0, kMaxClassId);
  }
  return out;
}

namespace {

template <typename T>
Grid<T> ResizeNearest(const Grid<T>& in, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw BadMaskShape("resize target must be at least 1x1");
  if (in.rows < 1 || in.cols < 1) throw BadMaskShape("cannot resize an empty grid");
  Grid<T> out(out_h, out_w);
  for (int r = 0; r < out_h; ++r) {
    const int sr = std::min(in.rows - 1, static_cast<int>(std::floor((r + 0.5) * in.rows / out_h)));
    for (int c = 0; c < out_w; ++c) {
      const int sc = std::min(in.cols - 1, static_cast<int>(std::floor((c + 0.5) * in.cols / out_w)));
      out.at(r, c) = in.at(sr, sc);
    }
  }
  return out;
}

}  // namespace

LabelGrid ResizeSemantic(const LabelGrid& mask, int out_h, int out_w) {
  LabelGrid out = ResizeNearest(mask, out_h, out_w);
  for (int& v : out.data) v = std::clamp(v, 0, kMaxClassId);
  return out;
}

DepthGrid ResizeDepthNearest(const DepthGrid& depth, int out_h, int out_w) {
  return ResizeNearest(depth, out_h, out_w);
}

std::map<int, double> MinDepthPerClass(const LabelGrid& mask, const DepthGrid& depth) {
  if (!mask.SameShape(depth)) throw ShapeMismatch("mask and depth grids differ in shape");
  std::map<int, double> out;
  for (size_t i = 0; i < mask.data.size(); ++i) {
    const double d = depth.data[i];
    if (!IsValidDepth(d)) continue;
    auto [it, inserted] = out.emplace(mask.data[i], d);
    if (!inserted && d < it->second) it->second = d;
  }
  return out;
}

SceneAnnotation BuildAnnotation(std::string sample_id, std::string image_ref, LabelGrid mask, DepthGrid depth,
                                const AccessibilityOntology& ontology) {
  SceneAnnotation a;
  a.sample_id = std::move(sample_id);
  a.image_ref = std::move(image_ref);
  const std::map<int, double> depths = MinDepthPerClass(mask, depth);
  for (int v : mask.data) a.present_classes.insert(v);
  for (int id : a.present_classes) {
    auto acc = ontology.AccessibilityOf(id);
    if (!acc) continue;
    a.class_names[id] = ontology.class_names[static_cast<size_t>(id)];
    a.class_accessibility[id] = *acc;
    if (auto it = depths.find(id); it != depths.end()) a.class_min_depth[id] = it->second;
  }
  a.semantic_mask = std::move(mask);
  a.depth_map = std::move(depth);
  return a;
}

std::vector<int> MentionedClasses(const SceneAnnotation& annotation, const AccessibilityOntology& ontology) {
  std::vector<int> accessible;
  std::vector<int> harmful;
  for (int id : annotation.present_classes) {  // std::set iterates ascending
    auto acc = ontology.AccessibilityOf(id);
    if (!acc) continue;
    (*acc == Accessibility::kAccessible ? accessible : harmful).push_back(id);
  }
  accessible.insert(accessible.end(), harmful.begin(), harmful.end());
  return accessible;
}

grammar::StructuredResponse AssembleAnswer(const SceneAnnotation& annotation, const AccessibilityOntology& ontology,
                                           const std::string& assessment) {
  const std::vector<int> classes = MentionedClasses(annotation, ontology);
  if (classes.empty()) throw NoFeatures("no accessible or harmful class present in " + annotation.sample_id);
  grammar::StructuredResponse r;
  r.assessment = assessment;
  for (int id : classes) {
    const std::string& name = ontology.class_names[static_cast<size_t>(id)];
    r.phrases.push_back({name, *ontology.AccessibilityOf(id), static_cast<int>(r.phrases.size())});
    if (auto it = annotation.class_min_depth.find(id); it != annotation.class_min_depth.end()) {
      r.distances.push_back({name, std::round(it->second * 10.0) / 10.0});
    }
  }
  r.raw_text = grammar::SerializeResponse(r);  // also enforces the invariants
  return r;
}

std::string TemplateAssessment(const SceneAnnotation& annotation, const AccessibilityOntology& ontology) {
  bool any_accessible = false;
  bool any_harmful = false;
  for (int id : annotation.present_classes) {
    auto acc = ontology.AccessibilityOf(id);
    if (!acc) continue;
    any_accessible = any_accessible || *acc == Accessibility::kAccessible;
    any_harmful = any_harmful || *acc == Accessibility::kHarmful;
  }
  if (any_accessible && any_harmful) {
    return "There is a walkable path ahead, but some hazards need attention.";
  }
  if (any_accessible) return "The path ahead looks clear and easy to walk.";
  if (any_harmful) return "The way forward is obstructed and no clear walkable surface is visible.";
  return "The scene offers no recognizable features to assess.";
}

uint64_t StableHash(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

const std::array<std::string_view, 8>& TemplateQuestionSource::Phrasings() {
  static const std::array<std::string_view, 8> kPhrasings = {
      "Is the path ahead accessible, and what should I watch out for?",
      "Can I walk safely through here, and are there any obstacles nearby?",
      "What parts of this scene are safe to walk on, and what should I avoid?",
      "Is there a clear route for me here, or is something in the way?",
      "How accessible is the way forward, and what hazards are around me?",
      "Where can I walk here, and is anything blocking my path?",
      "Is this area easy to get through on foot, and what might get in my way?",
      "What should I know about walking through this scene safely?",
  };
  return kPhrasings;
}

QaDraft TemplateQuestionSource::Generate(const SceneAnnotation& annotation, const AccessibilityOntology&) {
  const auto& p = Phrasings();
  return {std::string(p[StableHash(annotation.sample_id) % p.size()]), std::nullopt};
}

ReplayQuestionSource ReplayQuestionSource::FromJsonlText(std::string_view text) {
  ReplayQuestionSource src;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      QaDraft d;
      d.question = j.at("question").get<std::string>();
      if (j.contains("assessment")) d.assessment = j.at("assessment").get<std::string>();
      src.records_[j.at("sample_id").get<std::string>()] = std::move(d);
    } catch (const json::exception& e) {
      throw IoError("replay file line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return src;
}

ReplayQuestionSource ReplayQuestionSource::FromFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open replay file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return FromJsonlText(ss.str());
}

QaDraft ReplayQuestionSource::Generate(const SceneAnnotation& annotation, const AccessibilityOntology&) {
  auto it = records_.find(annotation.sample_id);
  if (it == records_.end()) throw GeneratorUnavailable("no recorded question for " + annotation.sample_id);
  return it->second;
}

HttpQuestionSource::HttpQuestionSource(std::string endpoint, double timeout_s)
    : endpoint_(std::move(endpoint)), timeout_s_(timeout_s) {}

QaDraft HttpQuestionSource::Generate(const SceneAnnotation& annotation, const AccessibilityOntology& ontology) {
  // Split "http://host:port/path" into the client base and request path.
  const size_t scheme = endpoint_.find("://");
  const size_t path_start = endpoint_.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  const std::string base = path_start == std::string::npos ? endpoint_ : endpoint_.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : endpoint_.substr(path_start);

  json features = json::array();
  for (const auto& [id, name] : annotation.class_names) {
    json f = {{"name", name}, {"accessibility", ToString(annotation.class_accessibility.at(id))}};
    features.push_back(std::move(f));
  }
  (void)ontology;
  const json body = {{"sample_id", annotation.sample_id}, {"image", annotation.image_ref}, {"features", features}};

  httplib::Client client(base);
  const auto secs = static_cast<time_t>(timeout_s_);
  const auto usecs = static_cast<time_t>((timeout_s_ - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  auto res = client.Post(path, body.dump(), "application/json");
  if (!res) throw GeneratorUnavailable("question generator unreachable at " + endpoint_);
  if (res->status != 200) {
    throw GeneratorUnavailable("question generator returned HTTP " + std::to_string(res->status));
  }
  try {
    const json reply = json::parse(res->body);
    QaDraft d;
    d.question = reply.at("question").get<std::string>();
    if (reply.contains("answer")) {
      std::string a = ExtractAssessment(reply.at("answer").get<std::string>());
      if (!a.empty()) d.assessment = std::move(a);
    }
    if (d.question.empty()) throw GeneratorUnavailable("question generator returned an empty question");
    return d;
  } catch (const json::exception& e) {
    throw GeneratorUnavailable(std::string("malformed generator reply: ") + e.what());
  }
}

QaDraft FallbackQuestionSource::Generate(const SceneAnnotation& annotation, const AccessibilityOntology& ontology) {
  try {
    return primary_->Generate(annotation, ontology);
  } catch (const GeneratorUnavailable&) {
    ++fallbacks_;
    return fallback_.Generate(annotation, ontology);
  }
}

BinaryMask ClassMask(const LabelGrid& mask, int class_id) {
  BinaryMask out(mask.rows, mask.cols);
  for (size_t i = 0; i < mask.data.size(); ++i) out.data[i] = mask.data[i] == class_id ? 1 : 0;
  return out;
}

VQASample BuildSample(const ChannelGrid& raw_mask3, const DepthGrid& depth, const BuildOptions& options,
                      const AccessibilityOntology& ontology, QuestionSource& question_source) {
  LabelGrid semantic = PanopticToSemantic(raw_mask3);
  DepthGrid d = depth;
  if (options.resize_to) {
    semantic = ResizeSemantic(semantic, options.resize_to->first, options.resize_to->second);
    d = ResizeDepthNearest(d, options.resize_to->first, options.resize_to->second);
  }
  if (!semantic.SameShape(d)) throw ShapeMismatch("panoptic mask and depth map differ in shape");

  VQASample s;
  s.sample_id = options.sample_id;
  s.image_ref = options.image_ref;
  s.annotation = BuildAnnotation(options.sample_id, options.image_ref, std::move(semantic), std::move(d), ontology);
  if (MentionedClasses(s.annotation, ontology).empty()) {
    throw NoFeatures("no accessible or harmful class present in " + options.sample_id);
  }

  QaDraft draft = question_source.Generate(s.annotation, ontology);
  const std::string assessment =
      draft.assessment && !draft.assessment->empty() ? *draft.assessment : TemplateAssessment(s.annotation, ontology);
  const grammar::StructuredResponse response = AssembleAnswer(s.annotation, ontology, assessment);
  s.question = std::move(draft.question);
  s.answer = response.raw_text;

  const std::vector<int> classes = MentionedClasses(s.annotation, ontology);
  for (size_t k = 0; k < classes.size(); ++k) {
    const int id = classes[k];
    s.mask_refs.push_back(s.sample_id + "_" + std::to_string(k));
    s.masks.push_back(ClassMask(s.annotation.semantic_mask, id));
    ObjectRecord rec{ontology.class_names[static_cast<size_t>(id)], id, *ontology.AccessibilityOf(id), std::nullopt};
    if (auto it = s.annotation.class_min_depth.find(id); it != s.annotation.class_min_depth.end()) {
      rec.distance_m = std::round(it->second * 10.0) / 10.0;
    }
    s.objects.push_back(std::move(rec));
  }
  return s;
}

std::vector<std::string> SampleSessionFrames(const std::vector<std::string>& frame_ids, int n) {
  if (n < 1) throw InvariantViolation("frame sample count must be at least 1");
  const size_t len = frame_ids.size();
  if (static_cast<size_t>(n) >= len) return frame_ids;
  std::vector<std::string> out;
  out.reserve(static_cast<size_t>(n));
  for (size_t i = 0; i < static_cast<size_t>(n); ++i) out.push_back(frame_ids[i * len / static_cast<size_t>(n)]);
  return out;
}

grammar::ValidationReport VerifySample(const VQASample& sample, double depth_tolerance) {
  grammar::ValidationReport report;
  report.sample_id = sample.sample_id;
  grammar::StructuredResponse response;
  try {
    response = grammar::ParseResponse(sample.answer);
  } catch (const MalformedResponse& e) {
    report.violations.push_back({grammar::ViolationCode::kMalformedAnswer, e.what()});
    return report;
  }
  report = grammar::ValidateResponse(response, sample.annotation, depth_tolerance);
  report.sample_id = sample.sample_id;

  if (sample.masks.size() != response.phrases.size() || sample.mask_refs.size() != response.phrases.size()) {
    report.violations.push_back({grammar::ViolationCode::kMaskCountMismatch,
                                 std::to_string(sample.masks.size()) + " masks for " +
                                     std::to_string(response.phrases.size()) + " phrases"});
  }

  const SceneAnnotation& a = sample.annotation;
  if (!a.semantic_mask.data.empty() && a.semantic_mask.SameShape(a.depth_map)) {
    const std::map<int, double> recomputed = MinDepthPerClass(a.semantic_mask, a.depth_map);
    for (const auto& [id, stored] : a.class_min_depth) {
      auto it = recomputed.find(id);
      if (it == recomputed.end() || it->second != stored) {
        report.violations.push_back({grammar::ViolationCode::kAnnotationDepthInconsistent,
                                     "stored depth for class " + std::to_string(id) +
                                         " disagrees with the depth map"});
      }
    }
  }
  return report;
}

DatasetReport VerifyDataset(const std::vector<VQASample>& samples, double depth_tolerance) {
  DatasetReport out;
  for (const VQASample& s : samples) {
    grammar::ValidationReport r = VerifySample(s, depth_tolerance);
    if (r.passed()) ++out.passed;
    for (const grammar::Violation& v : r.violations) ++out.histogram[grammar::ToString(v.code)];
    out.samples.push_back(std::move(r));
  }
  return out;
}

}  // namespace walkgpt::curation
