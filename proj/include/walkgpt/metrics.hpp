#pragma once

// Depth, segmentation, and hallucination metrics over parsed responses.

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "walkgpt/curation.hpp"
#include "walkgpt/grammar.hpp"
#include "walkgpt/scene.hpp"

namespace walkgpt::metrics {

struct DepthPair {
  double pred = 0.0;
  double gt = 0.0;
};

// Percent of pairs with 0.5*gt <= pred <= 2*gt. Throws EmptyInput.
double DepthAccuracy(const std::vector<DepthPair>& pairs);
// 100 * mean |pred - gt| / gt. Not capped: large errors exceed 100.
double AbsRel(const std::vector<DepthPair>& pairs);

using curation::BinaryMask;

// |a & b| / |a | b|, 1.0 when both are empty.
double MaskIou(const BinaryMask& a, const BinaryMask& b);

struct PredictedMask {
  int label = -1;  // class id
  BinaryMask mask;
  double score = 0.0;  // mean foreground probability inside the mask
};

struct GtMask {
  int label = -1;
  BinaryMask mask;
};

struct ImageMasks {
  std::vector<PredictedMask> predictions;
  std::vector<GtMask> ground_truth;
};

struct SegmentationScores {
  double miou = 0.0;
  double recall = 0.0;
  double ap50 = 0.0;
};

// Pairing: each GT mask takes the first unused same-label prediction in
// response order. AP50 ranks every prediction by score and matches greedily
// one-to-one against same-label GT at IoU >= 0.5.
SegmentationScores SegmentationMetrics(const std::vector<ImageMasks>& images);

// Synonym table: normalized phrase -> class id.
class Lexicon {
 public:
  // Every ontology name plus a built-in synonym list.
  static Lexicon Default(const curation::AccessibilityOntology& ontology);
  // Lines "class_id: name, synonym, ..."; '#' starts a comment.
  static Lexicon FromText(std::string_view text);
  std::string ToText() const;

  void Add(std::string_view phrase, int class_id);
  std::optional<int> Resolve(std::string_view phrase) const;
  size_t size() const { return table_.size(); }

 private:
  std::map<std::string, int> table_;
};

struct HallucinationScores {
  double chair_i = 0.0;
  double cover = 0.0;
  int mentions = 0;
  int hallucinated = 0;
  int present = 0;
  int covered = 0;
};

// Present classes are the annotation's non-ignore classes.
HallucinationScores HallucinationMetrics(const std::vector<grammar::StructuredResponse>& responses,
                                         const std::vector<SceneAnnotation>& annotations, const Lexicon& lexicon);

struct DistancePairs {
  std::vector<DepthPair> pairs;
  int skipped = 0;
};

DistancePairs ParseDistancesForEval(const grammar::StructuredResponse& response, const SceneAnnotation& annotation,
                                    const Lexicon* lexicon = nullptr);

struct MetricsReport {
  double depth_acc = 0.0;
  double abs_rel = 0.0;
  double miou = 0.0;
  double recall = 0.0;
  double ap50 = 0.0;
  double chair_i = 0.0;
  double cover = 0.0;
  int n_samples = 0;
  int n_depth_pairs = 0;
  int skipped_distances = 0;
  int parse_failures = 0;
  double parse_failure_rate = 0.0;

  std::string ToJson() const;
};

}  // namespace walkgpt::metrics
