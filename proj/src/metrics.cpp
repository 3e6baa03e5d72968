#include "walkgpt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "walkgpt/errors.hpp"

namespace walkgpt::metrics {

double DepthAccuracy(const std::vector<DepthPair>& pairs) {
  if (pairs.empty()) throw EmptyInput("depth accuracy needs at least one pair");
  size_t hits = 0;
  for (const DepthPair& p : pairs) {
    if (p.pred >= 0.5 * p.gt && p.pred <= 2.0 * p.gt) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(pairs.size());
}

double AbsRel(const std::vector<DepthPair>& pairs) {
  if (pairs.empty()) throw EmptyInput("AbsRel needs at least one pair");
  double sum = 0.0;
  for (const DepthPair& p : pairs) {
    if (!(p.gt > 0.0)) throw InvariantViolation("ground-truth depth must be positive");
    sum += std::abs(p.pred - p.gt) / p.gt;
  }
  return 100.0 * sum / static_cast<double>(pairs.size());
}

double MaskIou(const BinaryMask& a, const BinaryMask& b) {
  if (!a.SameShape(b)) throw ShapeMismatch("IoU of masks with different shapes");
  size_t inter = 0;
  size_t uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0;
    const bool y = b.data[i] != 0;
    inter += (x && y);
    uni += (x || y);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

SegmentationScores SegmentationMetrics(const std::vector<ImageMasks>& images) {
  SegmentationScores out;
  double miou_sum = 0.0;
  int miou_images = 0;
  size_t total_gt = 0;
  size_t recalled = 0;

  struct Ranked {
    double score;
    size_t image;
    size_t pred;
  };
  std::vector<Ranked> ranked;

  for (size_t i = 0; i < images.size(); ++i) {
    const ImageMasks& im = images[i];
    for (size_t p = 0; p < im.predictions.size(); ++p) ranked.push_back({im.predictions[p].score, i, p});
    if (im.ground_truth.empty()) continue;
    std::vector<bool> used(im.predictions.size(), false);
    double sum = 0.0;
    for (const GtMask& g : im.ground_truth) {
      for (size_t p = 0; p < im.predictions.size(); ++p) {
        if (!used[p] && im.predictions[p].label == g.label) {
          used[p] = true;
          sum += MaskIou(im.predictions[p].mask, g.mask);
          break;
        }
      }
      for (const PredictedMask& pm : im.predictions) {
        if (pm.label == g.label && MaskIou(pm.mask, g.mask) >= 0.5) {
          ++recalled;
          break;
        }
      }
    }
    total_gt += im.ground_truth.size();
    miou_sum += sum / static_cast<double>(im.ground_truth.size());
    ++miou_images;
  }
  if (miou_images > 0) out.miou = 100.0 * miou_sum / miou_images;
  if (total_gt > 0) out.recall = 100.0 * static_cast<double>(recalled) / static_cast<double>(total_gt);
  if (total_gt == 0 || ranked.empty()) return out;

  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> matched(images.size());
  for (size_t i = 0; i < images.size(); ++i) matched[i].assign(images[i].ground_truth.size(), false);
  std::vector<double> precision;
  std::vector<double> recall;
  size_t tp = 0;
  for (size_t r = 0; r < ranked.size(); ++r) {
    const ImageMasks& im = images[ranked[r].image];
    const PredictedMask& pm = im.predictions[ranked[r].pred];
    double best = 0.5;
    int best_g = -1;
    for (size_t g = 0; g < im.ground_truth.size(); ++g) {
      if (matched[ranked[r].image][g] || im.ground_truth[g].label != pm.label) continue;
      const double iou = MaskIou(pm.mask, im.ground_truth[g].mask);
      if (iou >= best && (best_g < 0 || iou > best)) {
        best = iou;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      matched[ranked[r].image][static_cast<size_t>(best_g)] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  // All-point interpolation: precision envelope integrated over recall steps.
  for (size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  out.ap50 = 100.0 * ap;
  return out;
}

namespace {

const std::vector<std::pair<std::string_view, std::string_view>>& BuiltinSynonyms() {
  static const std::vector<std::pair<std::string_view, std::string_view>> kSynonyms = {
      {"sidewalk", "pavement"},   {"sidewalk", "footpath"},  {"crosswalk", "zebra crossing"},
      {"crosswalk", "pedestrian crossing"}, {"road", "street"}, {"vehicle", "car"},
      {"vehicle", "bus"},         {"vehicle", "truck"},      {"pedestrian", "person"},
      {"pedestrian", "people"},   {"rider", "cyclist"},      {"stairs", "steps"},
      {"stairs", "staircase"},    {"pole", "post"},          {"pole", "lamp post"},
      {"obstacle", "barrier"},    {"curb", "kerb"},          {"tree", "trunk"},
      {"water body", "puddle"},   {"bike rack", "bicycle rack"}, {"hand rail", "handrail"},
  };
  return kSynonyms;
}

}  // namespace

Lexicon Lexicon::Default(const curation::AccessibilityOntology& ontology) {
  Lexicon lex;
  for (int id = 0; id < kNumClassIds; ++id) {
    if (ontology.IsIgnored(id)) continue;
    lex.Add(ontology.class_names[static_cast<size_t>(id)], id);
  }
  for (const auto& [canonical, synonym] : BuiltinSynonyms()) {
    if (auto id = ontology.FindClass(canonical)) lex.Add(synonym, *id);
  }
  return lex;
}

Lexicon Lexicon::FromText(std::string_view text) {
  Lexicon lex;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (grammar::NormalizeName(line).empty()) continue;
    const size_t colon = line.find(':');
    if (colon == std::string::npos) throw MalformedResponse("lexicon line " + std::to_string(line_no) + " lacks ':'");
    int id = 0;
    try {
      size_t used = 0;
      id = std::stoi(line.substr(0, colon), &used);
    } catch (const std::exception&) {
      throw MalformedResponse("lexicon line " + std::to_string(line_no) + " has a bad class id");
    }
    if (id < 0 || id > kMaxClassId) throw MalformedResponse("lexicon class id out of range");
    std::istringstream names(line.substr(colon + 1));
    std::string name;
    while (std::getline(names, name, ',')) {
      if (!grammar::NormalizeName(name).empty()) lex.Add(name, id);
    }
  }
  return lex;
}

std::string Lexicon::ToText() const {
  std::map<int, std::vector<std::string>> by_id;
  for (const auto& [name, id] : table_) by_id[id].push_back(name);
  std::ostringstream out;
  for (const auto& [id, names] : by_id) {
    out << id << ":";
    for (size_t i = 0; i < names.size(); ++i) out << (i ? ", " : " ") << names[i];
    out << "\n";
  }
  return out.str();
}

void Lexicon::Add(std::string_view phrase, int class_id) { table_[grammar::NormalizeName(phrase)] = class_id; }

std::optional<int> Lexicon::Resolve(std::string_view phrase) const {
  auto it = table_.find(grammar::NormalizeName(phrase));
  if (it == table_.end()) return std::nullopt;
  return it->second;
}

HallucinationScores HallucinationMetrics(const std::vector<grammar::StructuredResponse>& responses,
                                         const std::vector<SceneAnnotation>& annotations, const Lexicon& lexicon) {
  if (responses.size() != annotations.size()) throw ShapeMismatch("responses and annotations differ in count");
  HallucinationScores s;
  for (size_t i = 0; i < responses.size(); ++i) {
    const SceneAnnotation& a = annotations[i];
    std::set<int> mentioned;
    for (const grammar::GroundedPhrase& p : responses[i].phrases) {
      ++s.mentions;
      const std::optional<int> id = lexicon.Resolve(p.phrase);
      if (!id || !a.class_names.count(*id)) {
        ++s.hallucinated;
      } else {
        mentioned.insert(*id);
      }
    }
    s.present += static_cast<int>(a.class_names.size());
    s.covered += static_cast<int>(mentioned.size());
  }
  if (s.mentions > 0) s.chair_i = 100.0 * s.hallucinated / s.mentions;
  if (s.present > 0) s.cover = 100.0 * s.covered / s.present;
  return s;
}

DistancePairs ParseDistancesForEval(const grammar::StructuredResponse& response, const SceneAnnotation& annotation,
                                    const Lexicon* lexicon) {
  DistancePairs out;
  for (const grammar::DistanceEntry& e : response.distances) {
    std::optional<int> id;
    const std::string name = grammar::NormalizeName(e.object_name);
    for (const auto& [cid, cname] : annotation.class_names) {
      if (grammar::NormalizeName(cname) == name) id = cid;
    }
    if (!id && lexicon) id = lexicon->Resolve(name);
    auto it = id ? annotation.class_min_depth.find(*id) : annotation.class_min_depth.end();
    if (it == annotation.class_min_depth.end()) {
      ++out.skipped;
      continue;
    }
    out.pairs.push_back({e.distance_m, it->second});
  }
  return out;
}

std::string MetricsReport::ToJson() const {
  nlohmann::ordered_json j;
  j["depth_acc"] = depth_acc;
  j["abs_rel"] = abs_rel;
  j["miou"] = miou;
  j["recall"] = recall;
  j["ap50"] = ap50;
  j["chair_i"] = chair_i;
  j["cover"] = cover;
  j["n_samples"] = n_samples;
  j["n_depth_pairs"] = n_depth_pairs;
  j["skipped_distances"] = skipped_distances;
  j["parse_failures"] = parse_failures;
  j["parse_failure_rate"] = parse_failure_rate;
  return j.dump(2);
}

}  // namespace walkgpt::metrics
