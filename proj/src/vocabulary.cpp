#include "walkgpt/vocabulary.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "walkgpt/errors.hpp"
#include "walkgpt/grammar.hpp"

namespace walkgpt {
namespace {

constexpr std::string_view kTagStrings[] = {
    grammar::kAssessmentOpen, grammar::kAssessmentClose, grammar::kPhraseOpen, grammar::kPhraseClose,
    grammar::kSeg,            grammar::kDistanceOpen,    grammar::kDistanceClose,
};

size_t MatchTag(std::string_view text, size_t i) {
  for (std::string_view tag : kTagStrings) {
    if (text.substr(i, tag.size()) == tag) return tag.size();
  }
  return 0;
}

bool IsLetter(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

// Length of the unit starting at i: a letter run, one digit, or one byte.
size_t UnitLength(std::string_view text, size_t i) {
  if (IsLetter(text[i])) {
    size_t j = i;
    while (j < text.size() && IsLetter(text[j])) ++j;
    return j - i;
  }
  return 1;
}

}  // namespace

std::vector<std::string> PreTokenize(std::string_view text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    if (size_t n = MatchTag(text, i)) {
      out.emplace_back(text.substr(i, n));
      i += n;
      continue;
    }
    const char c = text[i];
    if (c == ' ' && i + 1 < text.size()) {
      const char next = text[i + 1];
      const bool glue = next != ' ' && next != '\n' && next != '\t' && next != '\r' && MatchTag(text, i + 1) == 0;
      if (glue) {
        const size_t n = UnitLength(text, i + 1);
        out.emplace_back(text.substr(i, n + 1));
        i += n + 1;
        continue;
      }
    }
    const size_t n = UnitLength(text, i);
    out.emplace_back(text.substr(i, n));
    i += n;
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>"}) Append(t);
  for (std::string_view tag : kTagStrings) Append(std::string(tag));
  Append("\n");
  for (char d = '0'; d <= '9'; ++d) {
    Append(std::string(1, d));
    Append(std::string(" ") + d);
  }
  for (char p : std::string_view(".,:;?!'-()")) {
    Append(std::string(1, p));
  }
  Append(" ");
}

void Vocabulary::Append(const std::string& token) {
  if (index_.count(token)) return;
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::Build(std::span<const std::string> corpus, int max_size) {
  Vocabulary v;
  std::map<std::string, long> counts;
  for (const std::string& doc : corpus) {
    for (std::string& t : PreTokenize(doc)) ++counts[std::move(t)];
  }
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [token, count] : ranked) {
    if (v.size() >= max_size) break;
    v.Append(token);
  }
  return v;
}

Vocabulary Vocabulary::FromTokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  for (const std::string& t : tokens) {
    if (v.index_.count(t)) throw InvariantViolation("duplicate vocabulary token");
    v.Append(t);
  }
  if (v.size() < kNumReserved || v.Token(kSeg) != grammar::kSeg) {
    throw InvariantViolation("vocabulary does not start with the reserved tokens");
  }
  return v;
}

int Vocabulary::Id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::Encode(std::string_view text) const {
  std::vector<int> ids;
  for (const std::string& t : PreTokenize(text)) {
    const int id = Id(t);
    if (id == kUnk && t.size() > 1 && t[0] == ' ') {
      // Fall back to a bare space plus the unit.
      ids.push_back(Id(" "));
      ids.push_back(Id(t.substr(1)));
    } else {
      ids.push_back(id);
    }
  }
  return ids;
}

std::string Vocabulary::Decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos || id == kSep) continue;
    if (id < 0 || id >= size()) {
      out += "<unk>";
      continue;
    }
    out += tokens_[static_cast<size_t>(id)];
  }
  return out;
}

}  // namespace walkgpt
