#pragma once

// Region alignment: attention-pooled positive regions per <SEG> token and an
// InfoNCE objective against the calibrated prompt embeddings.

#include <vector>

#include "walkgpt/ctp.hpp"
#include "walkgpt/tensor.hpp"

namespace walkgpt::align {

using ad::Matrix;
using ad::Var;
using ad::Index;

struct AlignmentConfig {
  int hidden = 128;   // H_llm
  int channels = 64;  // C
  int d_vis = 64;     // d_k == d_vis
  double tau = 0.07;
  int k_pos = 32;     // clamped to L
  int k_neg = 8;

  void Validate() const;
};

struct AlignmentParams {
  AlignmentConfig config;
  Var w_q;  // H_llm x d_k
  Var w_k;  // C x d_k
  Var w_v;  // C x d_k
  Var w_o;  // d_k x d_vis

  static AlignmentParams Create(const AlignmentConfig& config, ad::ParameterStore& store, ad::Rng& rng);
};

struct RegionAttention {
  Var pi;                    // L x 1
  std::vector<int> topk;     // selected indices, descending pi, ties to lowest index
  Var alpha;                 // |topk| x 1, sums to 1
};

// Indices of the k largest entries; equal values keep the lower index first.
std::vector<int> TopKIndices(const Matrix& column, int k);

// `t` is 1 x H_llm, `z` is the frozen L x C encoder grid.
RegionAttention AttendRegion(const Var& t, const Var& keys, int k_pos, const Var& w_q);
RegionAttention AttendRegion(const Var& t, const Matrix& z, const AlignmentParams& params);
// z+ = (sum_i alpha_i v_i) W_o, 1 x d_vis.
Var PositiveEmbedding(const RegionAttention& attn, const Var& values, const Var& w_o);

// Normalized projections of the k_neg non-selected tokens most similar to
// `anchor` (1 x d_vis, unit norm). `values` is L x d_k.
Var HardNegatives(const RegionAttention& attn, const Var& values, const Var& w_o, const Matrix& anchor, int k_neg);

// Mean over anchors of -log(exp(a) / (exp(a) + sum exp(r))), with
// a = scale*<e, z+>/tau and r = scale*<e, z->/tau. Each pool is n_i x d
// (n_i may be 0). `scale` may be undefined (treated as 1).
Var InfoNce(const std::vector<Var>& anchors, const std::vector<Var>& positives, const std::vector<Var>& pools,
            double tau, const Var& scale = Var());

struct AlignmentResult {
  Var loss;
  std::vector<Var> anchors;    // unit norm, one per valid (b, m)
  std::vector<Var> positives;  // unit norm
  std::vector<Var> pools;
  std::vector<RegionAttention> attention;
};

// `seg` holds per batch element the M x H_llm <SEG> states with validity;
// `z` the encoder grids; `bank` the CTP output for the same states.
AlignmentResult RegionAlignmentLoss(const ctp::SegTokenStates& seg, const std::vector<Matrix>& z,
                                    const ctp::CalibratedPromptBank& bank, const AlignmentParams& params,
                                    const ctp::CtpParams* ctp_params = nullptr);

}  // namespace walkgpt::align
