#pragma once

// Calibrated Text Projector: <SEG> hidden states -> banks of segmentation
// prompt embeddings.

#include <string>
#include <vector>

#include "walkgpt/tensor.hpp"

namespace walkgpt::ctp {

using ad::Matrix;
using ad::Var;

struct CtpConfig {
  int hidden = 128;  // H_llm
  int d_vis = 64;
  int k_bank = 4;
  bool use_logit_scale = false;  // alignment path only

  void Validate() const;
};

struct CtpParams {
  CtpConfig config;
  Var w_vis;  // H_llm x d_vis
  ad::LayerNorm norm1;
  ad::Linear fc1;  // d_vis -> 2 d_vis
  ad::LayerNorm norm2;
  ad::Linear fc2;  // 2 d_vis -> K_bank d_vis
  Var bias_bank;   // K_bank x d_vis
  Var log_logit_scale;  // 1 x 1; logit scale = exp(.) stays positive

  static CtpParams Create(const CtpConfig& config, ad::ParameterStore& store, ad::Rng& rng);
  Var LogitScale() const { return ad::Exp(log_logit_scale); }
};

// Per batch element an M_max x H_llm matrix; valid[b][m] marks real slots.
struct SegTokenStates {
  std::vector<Var> values;
  std::vector<std::vector<bool>> valid;
};

struct CalibratedPromptBank {
  std::vector<Var> values;  // per batch element: (M*K_bank) x d_vis
  std::vector<std::vector<bool>> valid;  // per row
  int k_bank = 0;

  // Row range of token m's sub-embeddings.
  int first_row(int m) const { return m * k_bank; }
};

Var ProjectSegTokens(const Var& t, const Var& w_vis);
// U (M x d_vis) -> (M*K_bank) x d_vis, token-major.
Var Calibrate(const CtpParams& params, const Var& u);
Var CtpForwardSample(const CtpParams& params, const Var& t);
CalibratedPromptBank CtpForward(const CtpParams& params, const SegTokenStates& states);

}  // namespace walkgpt::ctp
