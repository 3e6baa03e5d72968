#pragma once

// Conversation, segmentation, and combined training losses.

#include <string>
#include <vector>

#include "walkgpt/tensor.hpp"

namespace walkgpt::objectives {

using ad::Matrix;
using ad::Var;

enum class SpanLabel { kNone, kAssessment, kPhrase, kSeg, kDistance };

// One teacher-forced sequence. answer_mask[t] marks t as a loss-bearing
// target, predicted from logits row t-1.
struct TokenSequence {
  std::vector<int> input_ids;
  std::vector<bool> answer_mask;
  std::vector<SpanLabel> span_labels;

  size_t size() const { return input_ids.size(); }
  void Validate() const;
};

using TokenBatch = std::vector<TokenSequence>;

// Labels answer tokens by the structured block they belong to. Phrase and
// assessment spans include their tags; the distance span is the block's
// interior only.
std::vector<SpanLabel> LabelSpans(const std::vector<int>& ids, const std::vector<bool>& answer_mask);

enum class CeReduction {
  kPooledTokens,    // mean over every answer token in the batch
  kPerSequenceMean  // mean per sequence, then over sequences
};

// `logits[b]` is S_b x V.
Var MaskedCe(const std::vector<Var>& logits, const TokenBatch& batch,
             CeReduction reduction = CeReduction::kPooledTokens);

struct SpanCeResult {
  Var loss;  // 0 when empty
  bool empty = true;
  int count = 0;
};

SpanCeResult SpanCe(const std::vector<Var>& logits, const TokenBatch& batch, SpanLabel span);

struct MaskPair {
  Var logits;  // h x w
  Matrix gt;   // h x w, entries in {0, 1}
};

inline constexpr double kDiceEpsilon = 1.0;

Var DiceLoss(const std::vector<MaskPair>& pairs, double eps = kDiceEpsilon);
Var BceSeg(const std::vector<MaskPair>& pairs);

struct LossWeights {
  double ce = 0.1;
  double dice = 0.05;
  double bce = 0.35;
  double nce = 0.3;

  // Single segmentation weight split evenly across Dice and BCE.
  static LossWeights FromSingleAlpha2(double alpha1, double alpha2, double alpha3);
};

struct LossBreakdown {
  double ce = 0.0;
  double dice = 0.0;
  double bce = 0.0;
  double nce = 0.0;
  double dist_span_ce = 0.0;
  double total = 0.0;

  std::string ToJsonLine(long step) const;
};

// Weighted total; throws NonFiniteLoss if any component is not finite.
// Undefined components contribute zero.
Var TotalLoss(const Var& ce, const Var& dice, const Var& bce, const Var& nce, const LossWeights& weights);
LossBreakdown TotalLoss(double ce, double dice, double bce, double nce, const LossWeights& weights,
                        double dist_span_ce = 0.0);

}  // namespace walkgpt::objectives
