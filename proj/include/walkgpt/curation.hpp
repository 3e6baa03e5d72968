#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "walkgpt/grammar.hpp"
#include "walkgpt/scene.hpp"

namespace walkgpt::curation {

struct AccessibilityOntology {
  std::array<std::string, kNumClassIds> class_names;
  std::array<OntologyLabel, kNumClassIds> labels{};

  // The 30-class pedestrian label set with its accessible/harmful split.
  static AccessibilityOntology Default();
  // Reads {"classes": [{"id": 3, "name": "sidewalk", "label": "accessible"}, ...]}.
  static AccessibilityOntology FromJsonText(std::string_view text);
  std::string ToJsonText() const;

  void Validate() const;  // throws InvariantViolation
  bool IsIgnored(int class_id) const { return labels.at(static_cast<size_t>(class_id)) == OntologyLabel::kIgnore; }
  std::optional<Accessibility> AccessibilityOf(int class_id) const;
  std::optional<int> FindClass(std::string_view name) const;  // normalized comparison
};

LabelGrid PanopticToSemantic(const ChannelGrid& mask3);

// Nearest-neighbour with half-pixel centres.
LabelGrid ResizeSemantic(const LabelGrid& mask, int out_h, int out_w);
DepthGrid ResizeDepthNearest(const DepthGrid& depth, int out_h, int out_w);

inline bool IsValidDepth(double d) { return d > 0.0 && d < std::numeric_limits<double>::infinity(); }

std::map<int, double> MinDepthPerClass(const LabelGrid& mask, const DepthGrid& depth);

SceneAnnotation BuildAnnotation(std::string sample_id, std::string image_ref, LabelGrid mask, DepthGrid depth,
                                const AccessibilityOntology& ontology);

grammar::StructuredResponse AssembleAnswer(const SceneAnnotation& annotation,
                                           const AccessibilityOntology& ontology,
                                           const std::string& assessment);

// Ordered class ids referenced by AssembleAnswer: accessible ascending, then harmful ascending.
std::vector<int> MentionedClasses(const SceneAnnotation& annotation, const AccessibilityOntology& ontology);

// A short qualitative assessment derived from the scene's feature mix.
std::string TemplateAssessment(const SceneAnnotation& annotation, const AccessibilityOntology& ontology);

uint64_t StableHash(std::string_view s);  // FNV-1a 64

struct QaDraft {
  std::string question;
  std::optional<std::string> assessment;
};

enum class QuestionSourceKind { kExternalClient, kReplayFile, kDeterministicTemplate };

class QuestionSource {
 public:
  virtual ~QuestionSource() = default;
  virtual QuestionSourceKind kind() const = 0;
  // Throws GeneratorUnavailable when no question can be produced.
  virtual QaDraft Generate(const SceneAnnotation& annotation, const AccessibilityOntology& ontology) = 0;
};

class TemplateQuestionSource final : public QuestionSource {
 public:
  static const std::array<std::string_view, 8>& Phrasings();
  QuestionSourceKind kind() const override { return QuestionSourceKind::kDeterministicTemplate; }
  QaDraft Generate(const SceneAnnotation& annotation, const AccessibilityOntology& ontology) override;
};

// Replays questions recorded as JSONL: {"sample_id": ..., "question": ..., "assessment": ...}.
class ReplayQuestionSource final : public QuestionSource {
 public:
  static ReplayQuestionSource FromFile(const std::string& path);
  static ReplayQuestionSource FromJsonlText(std::string_view text);
  QuestionSourceKind kind() const override { return QuestionSourceKind::kReplayFile; }
  QaDraft Generate(const SceneAnnotation& annotation, const AccessibilityOntology& ontology) override;

 private:
  std::map<std::string, QaDraft> records_;
};

// POSTs {"sample_id", "image", "features": [...]} to an HTTP endpoint and
// expects {"question": ..., "answer": "<assessment> ... </assessment>..."}.
class HttpQuestionSource final : public QuestionSource {
 public:
  explicit HttpQuestionSource(std::string endpoint, double timeout_s = 10.0);
  QuestionSourceKind kind() const override { return QuestionSourceKind::kExternalClient; }
  QaDraft Generate(const SceneAnnotation& annotation, const AccessibilityOntology& ontology) override;

 private:
  std::string endpoint_;
  double timeout_s_;
};

// Uses `primary`, falling back to the deterministic template when it throws
// GeneratorUnavailable.
class FallbackQuestionSource final : public QuestionSource {
 public:
  explicit FallbackQuestionSource(std::unique_ptr<QuestionSource> primary) : primary_(std::move(primary)) {}
  QuestionSourceKind kind() const override { return primary_->kind(); }
  QaDraft Generate(const SceneAnnotation& annotation, const AccessibilityOntology& ontology) override;
  int fallback_count() const { return fallbacks_; }

 private:
  std::unique_ptr<QuestionSource> primary_;
  TemplateQuestionSource fallback_;
  int fallbacks_ = 0;
};

using BinaryMask = Grid<uint8_t>;

struct ObjectRecord {
  std::string name;
  int class_id = 0;
  Accessibility accessibility = Accessibility::kAccessible;
  std::optional<double> distance_m;  // rounded as rendered in the answer
};

struct VQASample {
  std::string sample_id;
  std::string image_ref;
  std::string question;
  std::string answer;
  std::vector<std::string> mask_refs;  // "{sample_id}_{seg_index}", phrase order
  std::vector<BinaryMask> masks;       // same order as mask_refs
  std::vector<ObjectRecord> objects;   // same order as phrases
  SceneAnnotation annotation;
  std::string split = "train";
};

BinaryMask ClassMask(const LabelGrid& mask, int class_id);

struct BuildOptions {
  std::string sample_id;
  std::string image_ref;
  std::optional<std::pair<int, int>> resize_to;  // applied to mask and depth before annotation
};

VQASample BuildSample(const ChannelGrid& raw_mask3, const DepthGrid& depth, const BuildOptions& options,
                      const AccessibilityOntology& ontology, QuestionSource& question_source);

std::vector<std::string> SampleSessionFrames(const std::vector<std::string>& frame_ids, int n);

struct DatasetReport {
  std::vector<grammar::ValidationReport> samples;
  size_t passed = 0;
  std::map<std::string, size_t> histogram;  // violation code -> count

  double pass_rate() const { return samples.empty() ? 0.0 : static_cast<double>(passed) / samples.size(); }
};

grammar::ValidationReport VerifySample(const VQASample& sample,
                                       double depth_tolerance = grammar::kDefaultDepthTolerance);
DatasetReport VerifyDataset(const std::vector<VQASample>& samples,
                            double depth_tolerance = grammar::kDefaultDepthTolerance);

}  // namespace walkgpt::curation
