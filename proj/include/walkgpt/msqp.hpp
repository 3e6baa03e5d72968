#pragma once

// Multi-Scale Query Projector: pixel-encoder grid -> fixed bank of 36
// language-space image tokens.

#include <array>
#include <string>
#include <vector>

#include "walkgpt/tensor.hpp"

namespace walkgpt::msqp {

using ad::Matrix;
using ad::Var;

inline constexpr int kNumScales = 4;  // native, pooled-by-2, pooled-by-4, global
inline constexpr int kPadTokens = 4;

// Encoder output: one (grid_h*grid_w) x C matrix per batch element.
struct FeatureGrid {
  std::vector<Matrix> values;
  int grid_h = 0;
  int grid_w = 0;

  int batch() const { return static_cast<int>(values.size()); }
  int tokens() const { return grid_h * grid_w; }
  int channels() const { return values.empty() ? 0 : static_cast<int>(values.front().cols()); }
  void Validate() const;  // shape and finiteness; throws ShapeMismatch / InvariantViolation
};

struct MsqpConfig {
  int channels = 64;      // C
  int d_proj = 128;
  int hidden = 128;       // H_llm
  int num_heads = 8;
  int num_layers = 2;
  std::array<int, kNumScales> queries_per_scale = {12, 8, 8, 4};
  bool mask_pad_tokens = false;  // pad rows are attendable downstream unless set

  int total_queries() const;
  int output_tokens() const { return total_queries() + kPadTokens; }
  void Validate() const;
};

struct CrossAttentionLayer {
  ad::LayerNorm norm;
  ad::Linear q;
  ad::Linear k;
  ad::Linear v;
  ad::Linear o;
};

struct ScaleBranch {
  Var gate_w;   // d_proj x 1
  Var gate_b;   // 1 x 1
  Var queries;  // Q_s x d_proj
  std::vector<CrossAttentionLayer> layers;
};

struct MsqpParams {
  MsqpConfig config;
  Var w_proj;    // C x d_proj
  std::array<ScaleBranch, kNumScales> scales;
  Var out_proj;  // d_proj x H_llm, no bias so zero pad rows stay zero

  // Registers every array under "msqp." in `store`.
  static MsqpParams Create(const MsqpConfig& config, ad::ParameterStore& store, ad::Rng& rng);
};

// Attention probabilities recorded during a forward pass, one entry per
// (scale, layer, head) in evaluation order.
struct AttentionTrace {
  std::vector<Matrix> weights;
};

struct TokenBanks {
  Var x1;  // L tokens
  Var x2;  // L/4
  Var x4;  // L/16
  Var xg;  // 1

  const Var& operator[](int s) const;
};

struct ProjectedImageTokens {
  std::vector<Var> values;  // per batch element: output_tokens x H_llm
  std::vector<bool> pad_mask;  // length output_tokens, true at pad rows
};

Var ProjectFeatures(const Var& z, const Var& w_proj);
TokenBanks MultiscalePool(const Var& f, int grid_h, int grid_w);
Var Gate(const Var& bank, const Var& w, const Var& b);
// `bank` is N x d_proj for one batch element.
Var CrossAttendScale(const Var& queries, const Var& bank, const std::vector<CrossAttentionLayer>& layers,
                     int num_heads, AttentionTrace* trace = nullptr);

// One batch element: grid tokens (L x C) -> output_tokens x H_llm.
Var ForwardSample(const MsqpParams& params, const Matrix& z, int grid_h, int grid_w,
                  AttentionTrace* trace = nullptr);
ProjectedImageTokens MsqpForward(const MsqpParams& params, const FeatureGrid& grid,
                                 AttentionTrace* trace = nullptr);

}  // namespace walkgpt::msqp
