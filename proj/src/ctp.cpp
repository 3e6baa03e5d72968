#include "walkgpt/ctp.hpp"

#include <cmath>

#include "walkgpt/errors.hpp"

namespace walkgpt::ctp {

void CtpConfig::Validate() const {
  if (hidden < 1 || d_vis < 1) throw InvariantViolation("CTP dims must be positive");
  if (k_bank < 1) throw InvariantViolation("K_bank must be at least 1");
}

CtpParams CtpParams::Create(const CtpConfig& config, ad::ParameterStore& store, ad::Rng& rng) {
  config.Validate();
  CtpParams p;
  p.config = config;
  p.w_vis = store.Add("ctp.w_vis",
                      ad::UniformMatrix(config.hidden, config.d_vis, 1.0 / std::sqrt(double(config.hidden)), rng));
  p.norm1 = ad::LayerNorm::Create(store, "ctp.mlp.norm1", config.d_vis);
  p.fc1 = ad::Linear::Create(store, "ctp.mlp.fc1", config.d_vis, 2 * config.d_vis, rng);
  p.norm2 = ad::LayerNorm::Create(store, "ctp.mlp.norm2", 2 * config.d_vis);
  p.fc2 = ad::Linear::Create(store, "ctp.mlp.fc2", 2 * config.d_vis, config.k_bank * config.d_vis, rng);
  p.bias_bank = store.Add("ctp.bias_bank", Matrix::Zero(config.k_bank, config.d_vis));
  p.log_logit_scale = store.Add("ctp.log_logit_scale", Matrix::Zero(1, 1));
  return p;
}

Var ProjectSegTokens(const Var& t, const Var& w_vis) {
  if (t.cols() != w_vis.rows()) {
    throw ShapeMismatch("SEG hidden size " + std::to_string(t.cols()) + " != W_vis rows " +
                        std::to_string(w_vis.rows()));
  }
  return ad::MatMul(t, w_vis);
}

Var Calibrate(const CtpParams& params, const Var& u) {
  const int k = params.config.k_bank;
  const int d = params.config.d_vis;
  if (u.rows() == 0) return Var::Constant(Matrix::Zero(0, d));
  if (u.cols() != d) throw ShapeMismatch("calibrate expects d_vis columns");
  const Var h = params.fc1(params.norm1(u));
  const Var mlp = params.fc2(params.norm2(ad::Gelu(h)));
  const Var grouped = ad::Reshape(mlp, u.rows() * k, d);
  std::vector<Var> tiles(static_cast<size_t>(u.rows()), params.bias_bank);
  return ad::Add(grouped, ad::ConcatRows(tiles));
}

Var CtpForwardSample(const CtpParams& params, const Var& t) {
  if (t.rows() == 0) return Var::Constant(Matrix::Zero(0, params.config.d_vis));
  return Calibrate(params, ProjectSegTokens(t, params.w_vis));
}

CalibratedPromptBank CtpForward(const CtpParams& params, const SegTokenStates& states) {
  if (states.valid.size() != states.values.size()) throw ShapeMismatch("validity mask batch size mismatch");
  CalibratedPromptBank bank;
  bank.k_bank = params.config.k_bank;
  for (size_t b = 0; b < states.values.size(); ++b) {
    const Var& t = states.values[b];
    if (states.valid[b].size() != static_cast<size_t>(t.rows())) throw ShapeMismatch("validity mask length mismatch");
    if (!t.value().allFinite()) throw InvariantViolation("SEG hidden states contain non-finite values");
    bank.values.push_back(CtpForwardSample(params, t));
    std::vector<bool> rows;
    for (bool v : states.valid[b]) rows.insert(rows.end(), static_cast<size_t>(bank.k_bank), v);
    bank.valid.push_back(std::move(rows));
  }
  return bank;
}

}  // namespace walkgpt::ctp
