#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "walkgpt/errors.hpp"
#include "walkgpt/objectives.hpp"
#include "walkgpt/vocabulary.hpp"

namespace wg = walkgpt;
namespace ad = walkgpt::ad;
namespace obj = walkgpt::objectives;
using ad::Matrix;
using ad::Var;
using fixtures::RandomMatrix;
using V = wg::Vocabulary;

namespace {

std::vector<Var> Constants(const std::vector<Matrix>& ms) {
  std::vector<Var> out;
  for (const Matrix& m : ms) out.push_back(Var::Constant(m));
  return out;
}

Matrix RandomBinary(long r, long c, ad::Rng& rng) {
  Matrix m(r, c);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = rng.Uniform() < 0.4 ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST(MaskedCe, MatchesPerPositionLoop) {
  ad::Rng rng(1);
  const auto batch = fixtures::RandomTokenBatch(rng, 2, 7, 11);
  const std::vector<Matrix> logits{RandomMatrix(7, 11, rng, 3.0), RandomMatrix(7, 11, rng, 3.0)};
  EXPECT_NEAR(obj::MaskedCe(Constants(logits), batch).item(), oracle::MaskedCe(logits, batch, true), 1e-9);
  EXPECT_NEAR(obj::MaskedCe(Constants(logits), batch, obj::CeReduction::kPerSequenceMean).item(),
              oracle::MaskedCe(logits, batch, false), 1e-9);
}

TEST(MaskedCeOracle, RandomInstances) {
  ad::Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const int B = rng.UniformInt(1, 4);
    const int S = rng.UniformInt(3, 64);
    const int Vs = rng.UniformInt(2, 512);
    const auto batch = fixtures::RandomTokenBatch(rng, B, S, Vs);
    std::vector<Matrix> logits;
    for (int b = 0; b < B; ++b) logits.push_back(RandomMatrix(S, Vs, rng, 4.0));
    ASSERT_NEAR(obj::MaskedCe(Constants(logits), batch).item(), oracle::MaskedCe(logits, batch, true), 1e-9);
  }
}

TEST(MaskedCe, PromptPositionsDoNotContribute) {
  ad::Rng rng(3);
  auto batch = fixtures::RandomTokenBatch(rng, 1, 8, 5);
  std::vector<Matrix> logits{RandomMatrix(8, 5, rng)};
  const double base = obj::MaskedCe(Constants(logits), batch).item();
  batch[0].input_ids[0] = (batch[0].input_ids[0] + 1) % 5;  // position 0 is never a target
  EXPECT_EQ(obj::MaskedCe(Constants(logits), batch).item(), base);
}

TEST(MaskedCe, UniformLogitsGiveLogV) {
  obj::TokenBatch batch(1);
  batch[0].input_ids = {1, 2, 3, 4};
  batch[0].answer_mask = {false, true, true, true};
  const Var l = Var::Constant(Matrix::Zero(4, 9));
  EXPECT_NEAR(obj::MaskedCe({l}, batch).item(), std::log(9.0), 1e-12);
}

TEST(MaskedCe, DegenerateWithoutAnswerTokens) {
  obj::TokenBatch batch(1);
  batch[0].input_ids = {1, 2, 3};
  batch[0].answer_mask = {false, false, false};
  EXPECT_THROW(obj::MaskedCe({Var::Constant(Matrix::Zero(3, 4))}, batch), wg::DegenerateBatch);
}

TEST(LabelSpans, TagsAndInterior) {
  const std::vector<int> ids{V::kBos, 20, V::kSep, V::kAssessmentOpen, 30, V::kAssessmentClose, V::kPhraseOpen, 31,
                             V::kPhraseClose, V::kSeg, V::kDistanceOpen, 32, 33, V::kDistanceClose, V::kEos};
  std::vector<bool> mask(ids.size(), true);
  mask[0] = mask[1] = mask[2] = false;
  const auto spans = obj::LabelSpans(ids, mask);
  using S = obj::SpanLabel;
  const std::vector<S> expected{S::kNone,   S::kNone,   S::kNone,     S::kAssessment, S::kAssessment,
                                S::kAssessment, S::kPhrase, S::kPhrase, S::kPhrase,     S::kSeg,
                                S::kNone,   S::kDistance, S::kDistance, S::kNone,       S::kNone};
  EXPECT_EQ(spans, expected);
}

TEST(SpanCe, EmptySpanIsFlaggedNotNaN) {
  ad::Rng rng(4);
  auto batch = fixtures::RandomTokenBatch(rng, 1, 6, 12);
  batch[0].span_labels.assign(6, obj::SpanLabel::kNone);
  const auto r = obj::SpanCe({Var::Constant(RandomMatrix(6, 12, rng))}, batch, obj::SpanLabel::kDistance);
  EXPECT_TRUE(r.empty);
  EXPECT_EQ(r.loss.item(), 0.0);
}

TEST(SpanCe, RestrictsToLabelledTargets) {
  ad::Rng rng(5);
  auto batch = fixtures::RandomTokenBatch(rng, 1, 6, 12);
  batch[0].answer_mask.assign(6, true);
  batch[0].answer_mask[0] = false;
  batch[0].span_labels.assign(6, obj::SpanLabel::kNone);
  batch[0].span_labels[3] = obj::SpanLabel::kDistance;
  const Matrix logits = RandomMatrix(6, 12, rng);
  const auto r = obj::SpanCe({Var::Constant(logits)}, batch, obj::SpanLabel::kDistance);
  EXPECT_FALSE(r.empty);
  EXPECT_EQ(r.count, 1);
  double z = 0.0;
  for (int v = 0; v < 12; ++v) z += std::exp(logits(2, v));
  EXPECT_NEAR(r.loss.item(), std::log(z) - logits(2, batch[0].input_ids[3]), 1e-12);
}

TEST(Dice, MatchesScalarLoop) {
  ad::Rng rng(6);
  const std::vector<Matrix> logits{RandomMatrix(8, 8, rng, 3.0)};
  const std::vector<Matrix> gt{RandomBinary(8, 8, rng)};
  const Var d = obj::DiceLoss({{Var::Constant(logits[0]), gt[0]}});
  EXPECT_NEAR(d.item(), oracle::Dice(logits, gt, 1.0), 1e-9);
}

TEST(DiceBceOracle, RandomInstances) {
  ad::Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const int n = rng.UniformInt(1, 4);
    const int h = rng.UniformInt(1, 64);
    const int w = rng.UniformInt(1, 64);
    std::vector<Matrix> logits, gt;
    std::vector<obj::MaskPair> pairs;
    for (int k = 0; k < n; ++k) {
      logits.push_back(RandomMatrix(h, w, rng, 6.0));
      gt.push_back(RandomBinary(h, w, rng));
      pairs.push_back({Var::Constant(logits.back()), gt.back()});
    }
    ASSERT_NEAR(obj::DiceLoss(pairs).item(), oracle::Dice(logits, gt, 1.0), 1e-9);
    ASSERT_NEAR(obj::BceSeg(pairs).item(), oracle::Bce(logits, gt), 1e-9);
  }
}

TEST(Dice, EmptyGroundTruthWithConfidentNegativeIsNearZero) {
  const Var l = Var::Constant(Matrix::Constant(4, 4, -40.0));
  EXPECT_NEAR(obj::DiceLoss({{l, Matrix::Zero(4, 4)}}).item(), 0.0, 1e-12);
}

TEST(Bce, StableForLargeLogits) {
  Matrix logits(1, 2);
  logits << 800.0, -800.0;
  Matrix gt(1, 2);
  gt << 0.0, 1.0;
  const double v = obj::BceSeg({{Var::Constant(logits), gt}}).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 800.0, 1e-9);
}

TEST(Objectives, ShapeMismatchThrows) {
  EXPECT_THROW(obj::DiceLoss({{Var::Constant(Matrix::Zero(2, 2)), Matrix::Zero(2, 3)}}), wg::ShapeMismatch);
  EXPECT_THROW(obj::BceSeg({{Var::Constant(Matrix::Zero(2, 2)), Matrix::Zero(3, 2)}}), wg::ShapeMismatch);
}

TEST(TotalLoss, DefaultWeightsCombine) {
  const obj::LossWeights w;
  EXPECT_EQ(w.ce, 0.1);
  EXPECT_EQ(w.dice, 0.05);
  EXPECT_EQ(w.bce, 0.35);
  EXPECT_EQ(w.nce, 0.3);
  const auto b = obj::TotalLoss(2.0, 1.0, 0.5, 3.0, w);
  EXPECT_NEAR(b.total, 0.1 * 2.0 + 0.05 * 1.0 + 0.35 * 0.5 + 0.3 * 3.0, 1e-15);
  const Var t = obj::TotalLoss(Var::Scalar(2.0), Var::Scalar(1.0), Var::Scalar(0.5), Var::Scalar(3.0), w);
  EXPECT_NEAR(t.item(), b.total, 1e-15);
}

TEST(TotalLoss, SingleAlphaSplitsEvenly) {
  const auto w = obj::LossWeights::FromSingleAlpha2(0.1, 0.4, 0.3);
  EXPECT_EQ(w.dice, 0.2);
  EXPECT_EQ(w.bce, 0.2);
}

TEST(TotalLoss, NonFiniteComponentThrows) {
  const obj::LossWeights w;
  EXPECT_THROW(obj::TotalLoss(Var::Scalar(std::numeric_limits<double>::quiet_NaN()), Var::Scalar(1.0),
                              Var::Scalar(1.0), Var::Scalar(1.0), w),
               wg::NonFiniteLoss);
  EXPECT_THROW(obj::TotalLoss(1.0, std::numeric_limits<double>::infinity(), 1.0, 1.0, w), wg::NonFiniteLoss);
}

TEST(TotalLoss, JsonLineHasFixedKeys) {
  const auto b = obj::TotalLoss(1.0, 1.0, 1.0, 1.0, obj::LossWeights{});
  const std::string line = b.ToJsonLine(3);
  EXPECT_EQ(line.find("{\"step\":3,\"ce\":"), 0u);
  EXPECT_NE(line.find("\"total\":"), std::string::npos);
  EXPECT_EQ(line.find('\n'), std::string::npos);
}
