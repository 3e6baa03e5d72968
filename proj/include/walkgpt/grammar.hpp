#pragma once

// Structured-token answer grammar:
//
//   <assessment> free text </assessment>
//   Accessible features are here:
//   <p>sidewalk</p><SEG><p>road</p><SEG>
//   Non-accessible features are here:
//   <p>pole</p><SEG>
//   <distance>
//   Distance from the user to sidewalk: 3.4 m;
//   to road: 1.0 m;
//   to pole: 5.2 m;
//   </distance>

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "walkgpt/scene.hpp"

namespace walkgpt::grammar {

inline constexpr std::string_view kAssessmentOpen = "<assessment>";
inline constexpr std::string_view kAssessmentClose = "</assessment>";
inline constexpr std::string_view kPhraseOpen = "<p>";
inline constexpr std::string_view kPhraseClose = "</p>";
inline constexpr std::string_view kSeg = "<SEG>";
inline constexpr std::string_view kDistanceOpen = "<distance>";
inline constexpr std::string_view kDistanceClose = "</distance>";

inline constexpr std::string_view kAccessibleHeader = "Accessible features are here:";
inline constexpr std::string_view kHarmfulHeader = "Non-accessible features are here:";
inline constexpr std::string_view kFirstDistancePrefix = "Distance from the user to ";
inline constexpr std::string_view kNextDistancePrefix = "to ";

// Default validator tolerance: half the 0.1 m rendering step.
inline constexpr double kDefaultDepthTolerance = 0.05;

struct GroundedPhrase {
  std::string phrase;
  Accessibility accessibility = Accessibility::kAccessible;
  int seg_index = 0;

  bool operator==(const GroundedPhrase&) const = default;
};

struct DistanceEntry {
  std::string object_name;
  double distance_m = 0.0;

  bool operator==(const DistanceEntry&) const = default;
};

struct StructuredResponse {
  std::string assessment;
  std::vector<GroundedPhrase> phrases;
  std::vector<DistanceEntry> distances;
  std::string raw_text;
};

// Field equality ignoring raw_text.
bool SameContent(const StructuredResponse& a, const StructuredResponse& b);

enum class ViolationCode {
  kUnknownObject,
  kDuplicateObject,
  kSegCountMismatch,
  kUnmentionedDistance,
  kDepthMismatch,
  kAccessibilityMismatch,
  kMaskCountMismatch,
  kAnnotationDepthInconsistent,
  kMalformedAnswer,
};

const char* ToString(ViolationCode code);

struct Violation {
  ViolationCode code;
  std::string message;
};

struct ValidationReport {
  std::string sample_id;
  std::vector<Violation> violations;

  bool passed() const { return violations.empty(); }
  size_t Count(ViolationCode code) const;
};

// Lower-cases and collapses whitespace runs; used for every name comparison.
std::string NormalizeName(std::string_view name);

// Renders a distance with one decimal, rounding half away from zero.
std::string FormatDistance(double meters);

StructuredResponse ParseResponse(std::string_view text);

std::string SerializeResponse(const StructuredResponse& response);

// Throws InvariantViolation describing the first broken invariant.
void CheckInvariants(const StructuredResponse& response);

ValidationReport ValidateResponse(const StructuredResponse& response,
                                  const SceneAnnotation& annotation,
                                  double depth_tolerance = kDefaultDepthTolerance);

std::vector<int> ExtractSegPositions(std::span<const int> token_ids, int seg_id);

}  // namespace walkgpt::grammar
