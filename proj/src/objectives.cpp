#include "walkgpt/objectives.hpp"

#include <cmath>
#include <json.hpp>

#include "walkgpt/errors.hpp"
#include "walkgpt/vocabulary.hpp"

namespace walkgpt::objectives {

void TokenSequence::Validate() const {
  if (answer_mask.size() != input_ids.size()) throw ShapeMismatch("answer_mask length differs from input_ids");
  if (!span_labels.empty() && span_labels.size() != input_ids.size()) {
    throw ShapeMismatch("span_labels length differs from input_ids");
  }
}

std::vector<SpanLabel> LabelSpans(const std::vector<int>& ids, const std::vector<bool>& answer_mask) {
  std::vector<SpanLabel> labels(ids.size(), SpanLabel::kNone);
  SpanLabel open = SpanLabel::kNone;
  for (size_t t = 0; t < ids.size(); ++t) {
    if (!answer_mask[t]) continue;
    switch (ids[t]) {
      case Vocabulary::kAssessmentOpen:
        open = SpanLabel::kAssessment;
        labels[t] = open;
        break;
      case Vocabulary::kAssessmentClose:
        labels[t] = SpanLabel::kAssessment;
        open = SpanLabel::kNone;
        break;
      case Vocabulary::kPhraseOpen:
        open = SpanLabel::kPhrase;
        labels[t] = open;
        break;
      case Vocabulary::kPhraseClose:
        labels[t] = SpanLabel::kPhrase;
        open = SpanLabel::kNone;
        break;
      case Vocabulary::kSeg:
        labels[t] = SpanLabel::kSeg;
        break;
      case Vocabulary::kDistanceOpen:
        open = SpanLabel::kDistance;
        break;
      case Vocabulary::kDistanceClose:
        open = SpanLabel::kNone;
        break;
      default:
        labels[t] = open;
    }
  }
  return labels;
}

namespace {

// Sum of target NLL over positions t where keep(t) holds; returns count too.
template <typename Keep>
std::pair<Var, int> SequenceNll(const Var& logits, const TokenSequence& seq, Keep keep) {
  std::vector<int> rows;
  std::vector<int> targets;
  for (size_t t = 1; t < seq.size(); ++t) {
    if (seq.answer_mask[t] && keep(t)) {
      rows.push_back(static_cast<int>(t - 1));
      targets.push_back(seq.input_ids[t]);
    }
  }
  if (rows.empty()) return {Var(), 0};
  if (logits.rows() < static_cast<ad::Index>(seq.size())) throw ShapeMismatch("logits shorter than sequence");
  return {ad::Sum(ad::NllRows(ad::GatherRows(logits, rows), targets)), static_cast<int>(rows.size())};
}

}  // namespace

Var MaskedCe(const std::vector<Var>& logits, const TokenBatch& batch, CeReduction reduction) {
  if (logits.size() != batch.size()) throw ShapeMismatch("logits batch size differs from token batch");
  std::vector<Var> sums;
  std::vector<Var> per_seq;
  int total = 0;
  for (size_t b = 0; b < batch.size(); ++b) {
    batch[b].Validate();
    auto [sum, count] = SequenceNll(logits[b], batch[b], [](size_t) { return true; });
    if (count == 0) continue;
    total += count;
    sums.push_back(sum);
    per_seq.push_back(ad::Scale(sum, 1.0 / count));
  }
  if (total == 0) throw DegenerateBatch("no answer positions in batch");
  if (reduction == CeReduction::kPooledTokens) return ad::Scale(ad::Sum(ad::ConcatRows(sums)), 1.0 / total);
  return ad::Mean(ad::ConcatRows(per_seq));
}

SpanCeResult SpanCe(const std::vector<Var>& logits, const TokenBatch& batch, SpanLabel span) {
  if (logits.size() != batch.size()) throw ShapeMismatch("logits batch size differs from token batch");
  std::vector<Var> sums;
  SpanCeResult result;
  for (size_t b = 0; b < batch.size(); ++b) {
    const TokenSequence& seq = batch[b];
    seq.Validate();
    if (seq.span_labels.empty()) continue;
    auto [sum, count] = SequenceNll(logits[b], seq, [&](size_t t) { return seq.span_labels[t] == span; });
    if (count == 0) continue;
    result.count += count;
    sums.push_back(sum);
  }
  if (result.count == 0) {
    result.loss = Var::Scalar(0.0);
    return result;
  }
  result.empty = false;
  result.loss = ad::Scale(ad::Sum(ad::ConcatRows(sums)), 1.0 / result.count);
  return result;
}

Var DiceLoss(const std::vector<MaskPair>& pairs, double eps) {
  if (pairs.empty()) throw DegenerateBatch("dice loss needs at least one mask pair");
  std::vector<Var> terms;
  for (const MaskPair& pair : pairs) {
    if (pair.logits.rows() != pair.gt.rows() || pair.logits.cols() != pair.gt.cols()) {
      throw ShapeMismatch("mask prediction and ground truth differ in shape");
    }
    const Var p = ad::Sigmoid(pair.logits);
    const Var inter = ad::Sum(ad::Mul(p, Var::Constant(pair.gt)));
    const Var num = ad::Add(ad::Scale(inter, 2.0), Var::Scalar(eps));
    const Var den = ad::Add(ad::Sum(p), Var::Scalar(pair.gt.sum() + eps));
    terms.push_back(ad::Sub(Var::Scalar(1.0), ad::Mul(num, ad::Reciprocal(den))));
  }
  return ad::Mean(ad::ConcatRows(terms));
}

Var BceSeg(const std::vector<MaskPair>& pairs) {
  if (pairs.empty()) throw DegenerateBatch("BCE loss needs at least one mask pair");
  std::vector<Var> terms;
  for (const MaskPair& pair : pairs) {
    if (pair.logits.rows() != pair.gt.rows() || pair.logits.cols() != pair.gt.cols()) {
      throw ShapeMismatch("mask prediction and ground truth differ in shape");
    }
    terms.push_back(ad::Mean(ad::BceWithLogits(pair.logits, pair.gt)));
  }
  return ad::Mean(ad::ConcatRows(terms));
}

LossWeights LossWeights::FromSingleAlpha2(double alpha1, double alpha2, double alpha3) {
  return LossWeights{alpha1, alpha2 / 2.0, alpha2 / 2.0, alpha3};
}

std::string LossBreakdown::ToJsonLine(long step) const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["ce"] = ce;
  j["dice"] = dice;
  j["bce"] = bce;
  j["nce"] = nce;
  j["dist_span_ce"] = dist_span_ce;
  j["total"] = total;
  return j.dump();
}

Var TotalLoss(const Var& ce, const Var& dice, const Var& bce, const Var& nce, const LossWeights& weights) {
  const std::pair<const Var*, double> parts[] = {{&ce, weights.ce}, {&dice, weights.dice}, {&bce, weights.bce},
                                                 {&nce, weights.nce}};
  Var total = Var::Scalar(0.0);
  for (const auto& [v, w] : parts) {
    if (!v->defined()) continue;
    if (!std::isfinite(v->item())) throw NonFiniteLoss("loss component is not finite");
    if (w != 0.0) total = ad::Add(total, ad::Scale(*v, w));
  }
  return total;
}

LossBreakdown TotalLoss(double ce, double dice, double bce, double nce, const LossWeights& weights,
                        double dist_span_ce) {
  for (double v : {ce, dice, bce, nce}) {
    if (!std::isfinite(v)) throw NonFiniteLoss("loss component is not finite");
  }
  LossBreakdown out{ce, dice, bce, nce, dist_span_ce, 0.0};
  out.total = weights.ce * ce + weights.dice * dice + weights.bce * bce + weights.nce * nce;
  return out;
}

}  // namespace walkgpt::objectives
