#include "walkgpt/grammar.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>

#include "walkgpt/errors.hpp"

namespace walkgpt::grammar {
namespace {

enum class TagKind { kAssessmentOpen, kAssessmentClose, kPhraseOpen, kPhraseClose, kSeg,
                     kDistanceOpen, kDistanceClose };

constexpr std::array<std::pair<std::string_view, TagKind>, 7> kTags = {{
    {kAssessmentOpen, TagKind::kAssessmentOpen},
    {kAssessmentClose, TagKind::kAssessmentClose},
    {kPhraseOpen, TagKind::kPhraseOpen},
    {kPhraseClose, TagKind::kPhraseClose},
    {kSeg, TagKind::kSeg},
    {kDistanceOpen, TagKind::kDistanceOpen},
    {kDistanceClose, TagKind::kDistanceClose},
}};

struct Item {
  bool is_tag = false;
  TagKind tag{};
  std::string text;
};

std::vector<Item> Lex(std::string_view s) {
  std::vector<Item> items;
  std::string pending;
  size_t i = 0;
  while (i < s.size()) {
    bool matched = false;
    if (s[i] == '<') {
      for (const auto& [str, kind] : kTags) {
        if (s.substr(i, str.size()) == str) {
          if (!pending.empty()) {
            items.push_back({false, {}, std::move(pending)});
            pending.clear();
          }
          items.push_back({true, kind, {}});
          i += str.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) pending.push_back(s[i++]);
  }
  if (!pending.empty()) items.push_back({false, {}, std::move(pending)});
  return items;
}

bool IsBlank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::string Trim(std::string_view s) {
  size_t b = 0;
  size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

bool StartsWithNoCase(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[i])) !=
        std::tolower(static_cast<unsigned char>(prefix[i]))) {
      return false;
    }
  }
  return true;
}

bool ContainsTag(std::string_view s) {
  for (const auto& [str, kind] : kTags) {
    if (s.find(str) != std::string_view::npos) return true;
  }
  return false;
}

DistanceEntry ParseDistanceEntry(std::string_view raw) {
  std::string entry = Trim(raw);
  const size_t colon = entry.rfind(':');
  if (colon == std::string::npos) throw MalformedResponse("distance entry without ':' in \"" + entry + "\"");
  std::string name = Trim(std::string_view(entry).substr(0, colon));
  if (StartsWithNoCase(name, kFirstDistancePrefix)) {
    name = Trim(std::string_view(name).substr(kFirstDistancePrefix.size()));
  } else if (StartsWithNoCase(name, kNextDistancePrefix)) {
    name = Trim(std::string_view(name).substr(kNextDistancePrefix.size()));
  }
  if (name.empty()) throw MalformedResponse("distance entry without object name");

  std::string value = Trim(std::string_view(entry).substr(colon + 1));
  if (!value.empty() && value.back() == 'm') value = Trim(std::string_view(value).substr(0, value.size() - 1));
  double meters = 0.0;
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, meters);
  if (value.empty() || ec != std::errc() || ptr != last) {
    throw MalformedResponse("non-numeric distance \"" + value + "\" for " + name);
  }
  if (!std::isfinite(meters) || meters < 0.0) {
    throw MalformedResponse("distance for " + name + " is not a finite non-negative value");
  }
  return {name, meters};
}

std::vector<DistanceEntry> ParseDistanceBlock(std::string_view body) {
  std::vector<DistanceEntry> out;
  size_t start = 0;
  while (start <= body.size()) {
    size_t end = body.find(';', start);
    if (end == std::string_view::npos) end = body.size();
    std::string_view piece = body.substr(start, end - start);
    if (!IsBlank(piece)) out.push_back(ParseDistanceEntry(piece));
    start = end + 1;
  }
  return out;
}

// Returns the section selected by the last header inside `text`, if any.
std::optional<Accessibility> LastHeader(std::string_view text) {
  const size_t harmful = text.rfind(kHarmfulHeader);
  size_t accessible = std::string_view::npos;
  for (size_t pos = text.find(kAccessibleHeader); pos != std::string_view::npos;
       pos = text.find(kAccessibleHeader, pos + 1)) {
    // "Non-accessible ..." starts with a lower-case 'a', so this is a real header.
    accessible = pos;
  }
  if (harmful == std::string_view::npos && accessible == std::string_view::npos) return std::nullopt;
  if (harmful == std::string_view::npos) return Accessibility::kAccessible;
  if (accessible == std::string_view::npos) return Accessibility::kHarmful;
  return harmful > accessible ? Accessibility::kHarmful : Accessibility::kAccessible;
}

}  // namespace

const char* ToString(ViolationCode code) {
  switch (code) {
    case ViolationCode::kUnknownObject: return "UNKNOWN_OBJECT";
    case ViolationCode::kDuplicateObject: return "DUPLICATE_OBJECT";
    case ViolationCode::kSegCountMismatch: return "SEG_COUNT_MISMATCH";
    case ViolationCode::kUnmentionedDistance: return "UNMENTIONED_DISTANCE";
    case ViolationCode::kDepthMismatch: return "DEPTH_MISMATCH";
    case ViolationCode::kAccessibilityMismatch: return "ACCESSIBILITY_MISMATCH";
    case ViolationCode::kMaskCountMismatch: return "MASK_COUNT_MISMATCH";
    case ViolationCode::kAnnotationDepthInconsistent: return "ANNOTATION_DEPTH_INCONSISTENT";
    case ViolationCode::kMalformedAnswer: return "MALFORMED_ANSWER";
  }
  return "UNKNOWN";
}

size_t ValidationReport::Count(ViolationCode code) const {
  return static_cast<size_t>(std::count_if(violations.begin(), violations.end(),
                                           [code](const Violation& v) { return v.code == code; }));
}

bool SameContent(const StructuredResponse& a, const StructuredResponse& b) {
  return a.assessment == b.assessment && a.phrases == b.phrases && a.distances == b.distances;
}

std::string NormalizeName(std::string_view name) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : name) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

std::string FormatDistance(double meters) {
  const double rounded = std::round(meters * 10.0) / 10.0;  // std::round is half-away-from-zero
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f", rounded);
  return buf;
}

StructuredResponse ParseResponse(std::string_view text) {
  StructuredResponse out;
  out.raw_text = std::string(text);
  const std::vector<Item> items = Lex(text);

  size_t i = 0;
  auto next_tag_is = [&](size_t at, TagKind kind) {
    return at < items.size() && items[at].is_tag && items[at].tag == kind;
  };

  while (i < items.size() && !items[i].is_tag) {
    if (!IsBlank(items[i].text)) throw MalformedResponse("text before <assessment> block");
    ++i;
  }
  if (!next_tag_is(i, TagKind::kAssessmentOpen)) throw MalformedResponse("missing <assessment> block");
  ++i;
  if (i < items.size() && !items[i].is_tag) {
    out.assessment = Trim(items[i].text);
    ++i;
  }
  if (!next_tag_is(i, TagKind::kAssessmentClose)) throw MalformedResponse("unterminated <assessment> block");
  ++i;
  if (out.assessment.empty()) throw MalformedResponse("empty <assessment> block");

  std::optional<Accessibility> section;
  bool seen_distance = false;
  while (i < items.size()) {
    const Item& item = items[i];
    if (!item.is_tag) {
      if (auto header = LastHeader(item.text)) section = header;
      ++i;
      continue;
    }
    switch (item.tag) {
      case TagKind::kPhraseOpen: {
        if (!section) throw MalformedResponse("<p> outside a feature section");
        ++i;
        if (i >= items.size() || items[i].is_tag) throw MalformedResponse("empty <p> phrase");
        std::string phrase = Trim(items[i].text);
        if (phrase.empty()) throw MalformedResponse("empty <p> phrase");
        ++i;
        if (!next_tag_is(i, TagKind::kPhraseClose)) throw MalformedResponse("unbalanced <p> for " + phrase);
        ++i;
        if (i < items.size() && !items[i].is_tag && IsBlank(items[i].text)) ++i;
        if (!next_tag_is(i, TagKind::kSeg)) throw MalformedResponse("<p>" + phrase + "</p> not followed by <SEG>");
        ++i;
        out.phrases.push_back({std::move(phrase), *section, static_cast<int>(out.phrases.size())});
        break;
      }
      case TagKind::kDistanceOpen: {
        if (seen_distance) throw MalformedResponse("multiple <distance> blocks");
        seen_distance = true;
        ++i;
        std::string body;
        if (i < items.size() && !items[i].is_tag) body = items[i++].text;
        if (!next_tag_is(i, TagKind::kDistanceClose)) throw MalformedResponse("unterminated <distance> block");
        ++i;
        out.distances = ParseDistanceBlock(body);
        std::set<std::string> names;
        for (const DistanceEntry& d : out.distances) {
          if (!names.insert(NormalizeName(d.object_name)).second) {
            throw MalformedResponse("duplicate distance entry for " + d.object_name);
          }
        }
        break;
      }
      case TagKind::kSeg: throw MalformedResponse("<SEG> without a preceding phrase");
      case TagKind::kPhraseClose: throw MalformedResponse("unbalanced </p>");
      case TagKind::kAssessmentOpen: throw MalformedResponse("multiple <assessment> blocks");
      case TagKind::kAssessmentClose: throw MalformedResponse("unbalanced </assessment>");
      case TagKind::kDistanceClose: throw MalformedResponse("unbalanced </distance>");
    }
  }
  return out;
}

void CheckInvariants(const StructuredResponse& r) {
  const std::string assessment = Trim(r.assessment);
  if (assessment.empty()) throw InvariantViolation("assessment is empty");
  if (assessment != r.assessment) throw InvariantViolation("assessment has surrounding whitespace");
  if (ContainsTag(r.assessment)) throw InvariantViolation("assessment contains a structured tag");
  std::set<std::string> phrase_names;
  for (size_t k = 0; k < r.phrases.size(); ++k) {
    const GroundedPhrase& p = r.phrases[k];
    if (p.phrase.empty() || Trim(p.phrase) != p.phrase) throw InvariantViolation("phrase empty or untrimmed");
    if (ContainsTag(p.phrase) || p.phrase.find('\n') != std::string::npos) {
      throw InvariantViolation("phrase contains a tag or newline: " + p.phrase);
    }
    if (p.seg_index != static_cast<int>(k)) throw InvariantViolation("seg_index not contiguous in order");
    phrase_names.insert(NormalizeName(p.phrase));
  }
  std::set<std::string> distance_names;
  for (const DistanceEntry& d : r.distances) {
    if (d.object_name.empty() || Trim(d.object_name) != d.object_name) {
      throw InvariantViolation("distance object name empty or untrimmed");
    }
    if (d.object_name.find_first_of(";:\n") != std::string::npos || ContainsTag(d.object_name)) {
      throw InvariantViolation("distance object name has reserved characters: " + d.object_name);
    }
    if (!std::isfinite(d.distance_m) || d.distance_m < 0.0) {
      throw InvariantViolation("distance for " + d.object_name + " not finite and non-negative");
    }
    if (!distance_names.insert(NormalizeName(d.object_name)).second) {
      throw InvariantViolation("duplicate distance entry for " + d.object_name);
    }
  }
}

std::string SerializeResponse(const StructuredResponse& r) {
  CheckInvariants(r);
  std::string out;
  out += kAssessmentOpen;
  out += ' ';
  out += r.assessment;
  out += ' ';
  out += kAssessmentClose;

  std::optional<Accessibility> section;
  for (const GroundedPhrase& p : r.phrases) {
    if (section != p.accessibility) {
      out += '\n';
      out += p.accessibility == Accessibility::kAccessible ? kAccessibleHeader : kHarmfulHeader;
      out += '\n';
      section = p.accessibility;
    }
    out += kPhraseOpen;
    out += p.phrase;
    out += kPhraseClose;
    out += kSeg;
  }

  if (!r.distances.empty()) {
    out += '\n';
    out += kDistanceOpen;
    out += '\n';
    for (size_t k = 0; k < r.distances.size(); ++k) {
      out += k == 0 ? kFirstDistancePrefix : kNextDistancePrefix;
      out += r.distances[k].object_name;
      out += ": ";
      out += FormatDistance(r.distances[k].distance_m);
      out += " m;\n";
    }
    out += kDistanceClose;
  }
  return out;
}

ValidationReport ValidateResponse(const StructuredResponse& response, const SceneAnnotation& annotation,
                                  double depth_tolerance) {
  ValidationReport report;
  report.sample_id = annotation.sample_id;
  auto add = [&](ViolationCode code, std::string message) {
    report.violations.push_back({code, std::move(message)});
  };

  std::map<std::string, int> class_by_name;
  for (const auto& [id, name] : annotation.class_names) class_by_name[NormalizeName(name)] = id;

  std::map<std::string, int> mentioned;  // normalized phrase -> class id (-1 unknown)
  for (const GroundedPhrase& p : response.phrases) {
    const std::string key = NormalizeName(p.phrase);
    auto it = class_by_name.find(key);
    const int cls = it == class_by_name.end() ? -1 : it->second;
    if (!mentioned.emplace(key, cls).second) {
      add(ViolationCode::kDuplicateObject, "phrase \"" + p.phrase + "\" grounded more than once");
    }
    if (cls < 0) {
      add(ViolationCode::kUnknownObject, "phrase \"" + p.phrase + "\" is not a class present in the scene");
      continue;
    }
    auto acc = annotation.class_accessibility.find(cls);
    if (acc != annotation.class_accessibility.end() && acc->second != p.accessibility) {
      add(ViolationCode::kAccessibilityMismatch, "phrase \"" + p.phrase + "\" listed as " +
                                                     ToString(p.accessibility) + " but ontology says " +
                                                     ToString(acc->second));
    }
  }

  const std::string_view text = response.raw_text.empty() ? std::string_view{} : response.raw_text;
  std::string serialized;
  std::string_view seg_source = text;
  if (seg_source.empty()) {
    serialized = SerializeResponse(response);
    seg_source = serialized;
  }
  size_t seg_count = 0;
  for (size_t pos = seg_source.find(kSeg); pos != std::string_view::npos; pos = seg_source.find(kSeg, pos + 1)) {
    ++seg_count;
  }
  if (seg_count != response.phrases.size()) {
    add(ViolationCode::kSegCountMismatch, std::to_string(seg_count) + " <SEG> tokens for " +
                                              std::to_string(response.phrases.size()) + " phrases");
  }

  for (const DistanceEntry& d : response.distances) {
    auto it = mentioned.find(NormalizeName(d.object_name));
    if (it == mentioned.end()) {
      add(ViolationCode::kUnmentionedDistance, "distance for unmentioned object \"" + d.object_name + "\"");
      continue;
    }
    if (it->second < 0) continue;  // already reported as unknown
    auto gt = annotation.class_min_depth.find(it->second);
    if (gt == annotation.class_min_depth.end()) {
      add(ViolationCode::kDepthMismatch, "\"" + d.object_name + "\" has no ground-truth depth");
      continue;
    }
    // The 1e-9 slack absorbs binary rounding of values that sit exactly on
    // the half-step boundary.
    if (std::abs(d.distance_m - gt->second) > depth_tolerance + 1e-9) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "\"%s\" at %.3f m vs ground truth %.3f m", d.object_name.c_str(),
                    d.distance_m, gt->second);
      add(ViolationCode::kDepthMismatch, buf);
    }
  }
  return report;
}

std::vector<int> ExtractSegPositions(std::span<const int> token_ids, int seg_id) {
  std::vector<int> positions;
  for (size_t i = 0; i < token_ids.size(); ++i) {
    if (token_ids[i] == seg_id) positions.push_back(static_cast<int>(i));
  }
  return positions;
}

}  // namespace walkgpt::grammar
