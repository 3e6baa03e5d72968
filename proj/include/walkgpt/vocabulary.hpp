#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace walkgpt {

// Splits text into pre-tokens whose concatenation reproduces the input:
// structured tags are atomic, words and punctuation carry at most one leading
// space, digits are single characters.
std::vector<std::string> PreTokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSep = 4;
  // Ids 5..11 are the structured tags, in this order.
  static constexpr int kAssessmentOpen = 5;
  static constexpr int kAssessmentClose = 6;
  static constexpr int kPhraseOpen = 7;
  static constexpr int kPhraseClose = 8;
  static constexpr int kSeg = 9;
  static constexpr int kDistanceOpen = 10;
  static constexpr int kDistanceClose = 11;
  static constexpr int kNumReserved = 12;

  Vocabulary();  // reserved tokens and the fixed base alphabet only

  // Adds every pre-token of `corpus` in (frequency desc, string asc) order
  // until `max_size` entries exist.
  static Vocabulary Build(std::span<const std::string> corpus, int max_size);
  static Vocabulary FromTokens(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& Token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
  int Id(std::string_view token) const;  // kUnk when absent

  std::vector<int> Encode(std::string_view text) const;
  // Reserved control tokens (pad/bos/eos/sep) are dropped.
  std::string Decode(std::span<const int> ids) const;

 private:
  void Append(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace walkgpt
