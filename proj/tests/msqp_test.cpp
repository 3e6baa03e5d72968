#include <gtest/gtest.h>

#include <cmath>

#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "walkgpt/errors.hpp"
#include "walkgpt/msqp.hpp"

namespace wg = walkgpt;
namespace ad = walkgpt::ad;
using ad::Matrix;
using ad::Var;
using fixtures::RandomMatrix;

namespace {

wg::msqp::MsqpParams MakeParams(const wg::msqp::MsqpConfig& cfg, uint64_t seed, bool random_biases) {
  ad::ParameterStore store;
  ad::Rng rng(seed);
  auto p = wg::msqp::MsqpParams::Create(cfg, store, rng);
  if (random_biases) {
    for (auto& [name, v] : store.entries()) {
      if (name.find("bias") != std::string::npos || name.find("beta") != std::string::npos ||
          name.find("gate.b") != std::string::npos) {
        v.mutable_value() = RandomMatrix(v.rows(), v.cols(), rng, 0.3);
      }
    }
  }
  return p;
}

Matrix LayerNormLoop(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
  Matrix y(x.rows(), x.cols());
  for (long r = 0; r < x.rows(); ++r) {
    double mu = 0.0;
    for (long c = 0; c < x.cols(); ++c) mu += x(r, c);
    mu /= x.cols();
    double var = 0.0;
    for (long c = 0; c < x.cols(); ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    var /= x.cols();
    for (long c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mu) / std::sqrt(var + 1e-5) * gamma(0, c) + beta(0, c);
  }
  return y;
}

Matrix AffineLoop(const Matrix& x, const ad::Linear& l) {
  Matrix y = oracle::MatMul(x, l.weight.value());
  for (long r = 0; r < y.rows(); ++r) {
    for (long c = 0; c < y.cols(); ++c) y(r, c) += l.bias.value()(0, c);
  }
  return y;
}

}  // namespace

TEST(Msqp, ProjectionMatchesTripleLoop) {
  ad::Rng rng(1);
  const Matrix z = RandomMatrix(4, 2, rng);
  const Matrix w = RandomMatrix(2, 3, rng);
  const Var f = wg::msqp::ProjectFeatures(Var::Constant(z), Var::Constant(w));
  EXPECT_LE(oracle::MaxAbsDiff(f.value(), oracle::MatMul(z, w)), 1e-9);
  EXPECT_THROW(wg::msqp::ProjectFeatures(Var::Constant(z), Var::Constant(RandomMatrix(3, 3, rng))),
               wg::ShapeMismatch);
}

TEST(MsqpOracle, MultiscalePoolMatchesLoops) {
  ad::Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const int gh = 4 * rng.UniformInt(1, 4);
    const int gw = 4 * rng.UniformInt(1, 4);
    const Matrix f = RandomMatrix(gh * gw, rng.UniformInt(1, 128), rng, 3.0);
    const auto banks = wg::msqp::MultiscalePool(Var::Constant(f), gh, gw);
    EXPECT_LE(oracle::MaxAbsDiff(banks.x1.value(), f), 0.0);
    EXPECT_LE(oracle::MaxAbsDiff(banks.x2.value(), oracle::AvgPool(f, gh, gw, 2)), 1e-9);
    EXPECT_LE(oracle::MaxAbsDiff(banks.x4.value(), oracle::AvgPool(f, gh, gw, 4)), 1e-9);
    EXPECT_EQ(banks.xg.rows(), 1);
    // The global bank is the mean of every token.
    Matrix mean = Matrix::Zero(1, f.cols());
    for (long r = 0; r < f.rows(); ++r) {
      for (long c = 0; c < f.cols(); ++c) mean(0, c) += f(r, c) / static_cast<double>(f.rows());
    }
    EXPECT_LE(oracle::MaxAbsDiff(banks.xg.value(), mean), 1e-9);
  }
}

TEST(Msqp, PoolOfConstantGridIsConstant) {
  const Matrix f = Matrix::Constant(64, 5, 2.5);
  const auto banks = wg::msqp::MultiscalePool(Var::Constant(f), 8, 8);
  EXPECT_EQ(banks.x2.rows(), 16);
  EXPECT_EQ(banks.x4.rows(), 4);
  EXPECT_LE((banks.x2.value().array() - 2.5).abs().maxCoeff(), 1e-12);
  EXPECT_LE((banks.x4.value().array() - 2.5).abs().maxCoeff(), 1e-12);
}

TEST(Msqp, BadGridShapes) {
  const Matrix f = Matrix::Zero(48, 3);
  EXPECT_THROW(wg::msqp::MultiscalePool(Var::Constant(f), 6, 8), wg::BadGridShape);
  EXPECT_THROW(wg::msqp::MultiscalePool(Var::Constant(Matrix::Zero(4, 3)), 2, 2), wg::BadGridShape);
  EXPECT_THROW(wg::msqp::MultiscalePool(Var::Constant(f), 4, 8), wg::ShapeMismatch);
}

TEST(Msqp, GateMatchesScalarLoop) {
  ad::Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const Matrix bank = RandomMatrix(rng.UniformInt(1, 64), 16, rng);
    const Matrix w = RandomMatrix(16, 1, rng);
    const double b = rng.Uniform(-1, 1);
    const Var g = wg::msqp::Gate(Var::Constant(bank), Var::Constant(w), Var::Scalar(b));
    EXPECT_LE(oracle::MaxAbsDiff(g.value(), oracle::Gate(bank, w, b)), 1e-9);
  }
}

TEST(Msqp, CrossAttentionMatchesLoopOracle) {
  ad::Rng rng(4);
  ad::ParameterStore store;
  wg::msqp::CrossAttentionLayer layer;
  layer.norm = ad::LayerNorm::Create(store, "n", 4);
  layer.norm.gamma.mutable_value() = RandomMatrix(1, 4, rng);
  layer.norm.beta.mutable_value() = RandomMatrix(1, 4, rng);
  layer.q = ad::Linear::Create(store, "q", 4, 4, rng);
  layer.k = ad::Linear::Create(store, "k", 4, 4, rng);
  layer.v = ad::Linear::Create(store, "v", 4, 4, rng);
  layer.o = ad::Linear::Create(store, "o", 4, 4, rng);
  for (ad::Linear* l : {&layer.q, &layer.k, &layer.v, &layer.o}) l->bias.mutable_value() = RandomMatrix(1, 4, rng);
  const Matrix queries = RandomMatrix(2, 4, rng);
  const Matrix bank = RandomMatrix(3, 4, rng);

  wg::msqp::AttentionTrace trace;
  const Var out = wg::msqp::CrossAttendScale(Var::Constant(queries), Var::Constant(bank), {layer}, 1, &trace);

  const Matrix q = AffineLoop(LayerNormLoop(queries, layer.norm.gamma.value(), layer.norm.beta.value()), layer.q);
  const Matrix attended = oracle::Attention(q, AffineLoop(bank, layer.k), AffineLoop(bank, layer.v));
  Matrix expected = AffineLoop(attended, layer.o);
  for (long i = 0; i < expected.size(); ++i) expected.data()[i] += queries.data()[i];
  EXPECT_LE(oracle::MaxAbsDiff(out.value(), expected), 1e-9);
  ASSERT_EQ(trace.weights.size(), 1u);
  EXPECT_EQ(trace.weights[0].rows(), 2);
  EXPECT_EQ(trace.weights[0].cols(), 3);
}

TEST(MsqpInvariant, EmitsFixedTokenCountWithZeroPads) {
  wg::msqp::MsqpConfig cfg;
  cfg.channels = 8;
  cfg.d_proj = 16;
  cfg.hidden = 24;
  cfg.num_heads = 4;
  const auto params = MakeParams(cfg, 7, true);
  ad::Rng rng(8);
  for (int gh : {4, 8, 12, 16}) {
    for (int gw : {4, 8, 16}) {
      wg::msqp::FeatureGrid grid;
      grid.grid_h = gh;
      grid.grid_w = gw;
      grid.values = {RandomMatrix(gh * gw, 8, rng), RandomMatrix(gh * gw, 8, rng)};
      wg::msqp::AttentionTrace trace;
      const auto out = wg::msqp::MsqpForward(params, grid, &trace);
      ASSERT_EQ(out.values.size(), 2u);
      for (const Var& v : out.values) {
        ASSERT_EQ(v.rows(), 36);
        ASSERT_EQ(v.cols(), 24);
        EXPECT_EQ(v.value().bottomRows(4).cwiseAbs().maxCoeff(), 0.0);
        EXPECT_GT(v.value().topRows(32).cwiseAbs().maxCoeff(), 0.0);
      }
      ASSERT_EQ(out.pad_mask.size(), 36u);
      for (int i = 0; i < 36; ++i) EXPECT_EQ(out.pad_mask[static_cast<size_t>(i)], i >= 32);
      for (const Matrix& w : trace.weights) {
        for (long r = 0; r < w.rows(); ++r) EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-6);
      }
    }
  }
}

TEST(Msqp, ChannelMismatchThrows) {
  wg::msqp::MsqpConfig cfg;
  cfg.channels = 8;
  cfg.d_proj = 16;
  cfg.hidden = 16;
  cfg.num_heads = 2;
  const auto params = MakeParams(cfg, 1, false);
  wg::msqp::FeatureGrid grid;
  grid.grid_h = grid.grid_w = 4;
  grid.values = {Matrix::Zero(16, 9)};
  EXPECT_THROW(wg::msqp::MsqpForward(params, grid), wg::ShapeMismatch);
}

TEST(Msqp, ConfigRejectsZeroQueries) {
  wg::msqp::MsqpConfig cfg;
  cfg.queries_per_scale = {12, 0, 8, 4};
  EXPECT_THROW(cfg.Validate(), wg::InvariantViolation);
  cfg.queries_per_scale = {12, 8, 8, 4};
  cfg.num_heads = 7;
  EXPECT_THROW(cfg.Validate(), wg::InvariantViolation);
}

TEST(Msqp, SwapInsidePoolCellLeavesOutputUnchanged) {
  // Cross-attention carries no positional signal, so a swap inside one 2x2
  // cell changes no bank as a set.
  wg::msqp::MsqpConfig cfg;
  cfg.channels = 4;
  cfg.d_proj = 8;
  cfg.hidden = 8;
  cfg.num_heads = 2;
  const auto params = MakeParams(cfg, 3, true);
  ad::Rng rng(3);
  Matrix z = RandomMatrix(64, 4, rng);
  const Var a = wg::msqp::ForwardSample(params, z, 8, 8, nullptr);
  z.row(0).swap(z.row(9));
  const Var b = wg::msqp::ForwardSample(params, z, 8, 8, nullptr);
  EXPECT_LE(oracle::MaxAbsDiff(a.value(), b.value()), 1e-12);
}
