#include "walkgpt/msqp.hpp"

#include <cmath>
#include <numeric>

#include "walkgpt/errors.hpp"

namespace walkgpt::msqp {

void FeatureGrid::Validate() const {
  if (grid_h < 1 || grid_w < 1) throw ShapeMismatch("feature grid must be non-empty");
  for (const Matrix& m : values) {
    if (m.rows() != static_cast<ad::Index>(grid_h) * grid_w) {
      throw ShapeMismatch("feature grid token count " + std::to_string(m.rows()) + " != grid_h*grid_w");
    }
    if (m.cols() != values.front().cols()) throw ShapeMismatch("feature grid channel count varies across batch");
    if (!m.allFinite()) throw InvariantViolation("feature grid contains non-finite values");
  }
}

int MsqpConfig::total_queries() const {
  return std::accumulate(queries_per_scale.begin(), queries_per_scale.end(), 0);
}

void MsqpConfig::Validate() const {
  if (channels < 1 || d_proj < 1 || hidden < 1 || num_layers < 1) throw InvariantViolation("MSQP dims must be positive");
  if (num_heads < 1 || d_proj % num_heads != 0) throw InvariantViolation("head count must divide d_proj");
  for (int q : queries_per_scale) {
    if (q < 1) throw InvariantViolation("each scale needs at least one query");
  }
}

MsqpParams MsqpParams::Create(const MsqpConfig& config, ad::ParameterStore& store, ad::Rng& rng) {
  config.Validate();
  MsqpParams p;
  p.config = config;
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(config.channels));
  const double d_scale = 1.0 / std::sqrt(static_cast<double>(config.d_proj));
  p.w_proj = store.Add("msqp.w_proj", ad::UniformMatrix(config.channels, config.d_proj, proj_scale, rng));
  static const char* kScaleNames[kNumScales] = {"s1", "s2", "s4", "sg"};
  for (int s = 0; s < kNumScales; ++s) {
    const std::string prefix = std::string("msqp.") + kScaleNames[s];
    ScaleBranch& b = p.scales[static_cast<size_t>(s)];
    b.gate_w = store.Add(prefix + ".gate.w", ad::UniformMatrix(config.d_proj, 1, d_scale, rng));
    b.gate_b = store.Add(prefix + ".gate.b", Matrix::Zero(1, 1));
    b.queries = store.Add(prefix + ".queries",
                          ad::UniformMatrix(config.queries_per_scale[static_cast<size_t>(s)], config.d_proj, d_scale, rng));
    for (int l = 0; l < config.num_layers; ++l) {
      const std::string lp = prefix + ".layer" + std::to_string(l);
      CrossAttentionLayer layer;
      layer.norm = ad::LayerNorm::Create(store, lp + ".norm", config.d_proj);
      layer.q = ad::Linear::Create(store, lp + ".q", config.d_proj, config.d_proj, rng);
      layer.k = ad::Linear::Create(store, lp + ".k", config.d_proj, config.d_proj, rng);
      layer.v = ad::Linear::Create(store, lp + ".v", config.d_proj, config.d_proj, rng);
      layer.o = ad::Linear::Create(store, lp + ".o", config.d_proj, config.d_proj, rng);
      b.layers.push_back(std::move(layer));
    }
  }
  p.out_proj = store.Add("msqp.out_proj", ad::UniformMatrix(config.d_proj, config.hidden, d_scale, rng));
  return p;
}

const Var& TokenBanks::operator[](int s) const {
  switch (s) {
    case 0: return x1;
    case 1: return x2;
    case 2: return x4;
    default: return xg;
  }
}

Var ProjectFeatures(const Var& z, const Var& w_proj) {
  if (z.cols() != w_proj.rows()) {
    throw ShapeMismatch("encoder channels " + std::to_string(z.cols()) + " != W_proj rows " +
                        std::to_string(w_proj.rows()));
  }
  return ad::MatMul(z, w_proj);
}

TokenBanks MultiscalePool(const Var& f, int grid_h, int grid_w) {
  if (grid_h < 4 || grid_w < 4 || grid_h % 4 != 0 || grid_w % 4 != 0) {
    throw BadGridShape("grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                       " is not divisible by 4 on both axes");
  }
  if (f.rows() != static_cast<ad::Index>(grid_h) * grid_w) throw ShapeMismatch("token count does not match grid");
  TokenBanks banks;
  banks.x1 = f;
  banks.x2 = ad::AvgPoolGrid(f, grid_h, grid_w, 2);
  banks.x4 = ad::AvgPoolGrid(f, grid_h, grid_w, 4);
  banks.xg = ad::ColMean(f);
  return banks;
}

Var Gate(const Var& bank, const Var& w, const Var& b) {
  const Var score = ad::AddRowBroadcast(ad::MatMul(bank, w), b);  // N x 1
  return ad::MulColBroadcast(bank, ad::Sigmoid(score));
}

Var CrossAttendScale(const Var& queries, const Var& bank, const std::vector<CrossAttentionLayer>& layers,
                     int num_heads, AttentionTrace* trace) {
  if (bank.rows() < 1) throw ShapeMismatch("cross-attention over an empty bank");
  const ad::Index d = queries.cols();
  const ad::Index dh = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = queries;
  for (const CrossAttentionLayer& layer : layers) {
    const Var qh = layer.q(layer.norm(q));
    const Var kh = layer.k(bank);
    const Var vh = layer.v(bank);
    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(num_heads));
    for (int h = 0; h < num_heads; ++h) {
      const Var scores = ad::Scale(ad::MatMulNT(ad::SliceCols(qh, h * dh, dh), ad::SliceCols(kh, h * dh, dh)), inv_sqrt);
      const Var attn = ad::SoftmaxRows(scores);
      if (trace) trace->weights.push_back(attn.value());
      heads.push_back(ad::MatMul(attn, ad::SliceCols(vh, h * dh, dh)));
    }
    q = ad::Add(q, layer.o(ad::ConcatCols(heads)));
  }
  return q;
}

Var ForwardSample(const MsqpParams& params, const Matrix& z, int grid_h, int grid_w, AttentionTrace* trace) {
  const Var f = ProjectFeatures(Var::Constant(z), params.w_proj);
  const TokenBanks banks = MultiscalePool(f, grid_h, grid_w);
  std::vector<Var> outputs;
  outputs.reserve(kNumScales + 1);
  for (int s = 0; s < kNumScales; ++s) {
    const ScaleBranch& branch = params.scales[static_cast<size_t>(s)];
    const Var gated = Gate(banks[s], branch.gate_w, branch.gate_b);
    outputs.push_back(CrossAttendScale(branch.queries, gated, branch.layers, params.config.num_heads, trace));
  }
  outputs.push_back(Var::Constant(Matrix::Zero(kPadTokens, params.config.d_proj)));
  return ad::MatMul(ad::ConcatRows(outputs), params.out_proj);
}

ProjectedImageTokens MsqpForward(const MsqpParams& params, const FeatureGrid& grid, AttentionTrace* trace) {
  grid.Validate();
  if (grid.channels() != params.config.channels && grid.batch() > 0) {
    throw ShapeMismatch("feature channels " + std::to_string(grid.channels()) + " != configured " +
                        std::to_string(params.config.channels));
  }
  ProjectedImageTokens out;
  for (const Matrix& z : grid.values) out.values.push_back(ForwardSample(params, z, grid.grid_h, grid.grid_w, trace));
  out.pad_mask.assign(static_cast<size_t>(params.config.output_tokens()), false);
  for (int i = params.config.total_queries(); i < params.config.output_tokens(); ++i) {
    out.pad_mask[static_cast<size_t>(i)] = true;
  }
  return out;
}

}  // namespace walkgpt::msqp
