#include "walkgpt/region_alignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "walkgpt/errors.hpp"

namespace walkgpt::align {

void AlignmentConfig::Validate() const {
  if (hidden < 1 || channels < 1 || d_vis < 1) throw InvariantViolation("alignment dims must be positive");
  if (!(tau > 0.0)) throw InvariantViolation("tau must be positive");
  if (k_pos < 1) throw InvariantViolation("K_pos must be at least 1");
  if (k_neg < 0) throw InvariantViolation("K_neg must be non-negative");
}

AlignmentParams AlignmentParams::Create(const AlignmentConfig& config, ad::ParameterStore& store, ad::Rng& rng) {
  config.Validate();
  AlignmentParams p;
  p.config = config;
  const double sh = 1.0 / std::sqrt(double(config.hidden));
  const double sc = 1.0 / std::sqrt(double(config.channels));
  const double sd = 1.0 / std::sqrt(double(config.d_vis));
  p.w_q = store.Add("align.w_q", ad::UniformMatrix(config.hidden, config.d_vis, sh, rng));
  p.w_k = store.Add("align.w_k", ad::UniformMatrix(config.channels, config.d_vis, sc, rng));
  p.w_v = store.Add("align.w_v", ad::UniformMatrix(config.channels, config.d_vis, sc, rng));
  p.w_o = store.Add("align.w_o", ad::UniformMatrix(config.d_vis, config.d_vis, sd, rng));
  return p;
}

std::vector<int> TopKIndices(const Matrix& column, int k) {
  std::vector<int> idx(static_cast<size_t>(column.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const double* v = column.data();
  std::stable_sort(idx.begin(), idx.end(), [v](int a, int b) { return v[a] > v[b]; });
  idx.resize(std::min<size_t>(idx.size(), static_cast<size_t>(std::max(k, 0))));
  return idx;
}

RegionAttention AttendRegion(const Var& t, const Var& keys, int k_pos, const Var& w_q) {
  if (keys.rows() < 1) throw ShapeMismatch("region attention over an empty grid");
  const Var q = ad::MatMul(t, w_q);
  const double inv_sqrt = 1.0 / std::sqrt(double(keys.cols()));
  RegionAttention attn;
  attn.pi = ad::Transpose(ad::SoftmaxRows(ad::Scale(ad::MatMulNT(q, keys), inv_sqrt)));
  attn.topk = TopKIndices(attn.pi.value(), std::min<int>(k_pos, static_cast<int>(keys.rows())));
  const Var selected = ad::GatherRows(attn.pi, attn.topk);
  attn.alpha = ad::MulScalar(selected, ad::Reciprocal(ad::Sum(selected)));
  return attn;
}

RegionAttention AttendRegion(const Var& t, const Matrix& z, const AlignmentParams& params) {
  const Var keys = ad::MatMul(Var::Constant(z), params.w_k);
  return AttendRegion(t, keys, params.config.k_pos, params.w_q);
}

Var PositiveEmbedding(const RegionAttention& attn, const Var& values, const Var& w_o) {
  const Var pooled = ad::MatMul(ad::Transpose(attn.alpha), ad::GatherRows(values, attn.topk));
  return ad::MatMul(pooled, w_o);
}

Var HardNegatives(const RegionAttention& attn, const Var& values, const Var& w_o, const Matrix& anchor, int k_neg) {
  const int L = static_cast<int>(values.rows());
  std::vector<bool> chosen(static_cast<size_t>(L), false);
  for (int i : attn.topk) chosen[static_cast<size_t>(i)] = true;
  std::vector<int> rest;
  for (int i = 0; i < L; ++i) {
    if (!chosen[static_cast<size_t>(i)]) rest.push_back(i);
  }
  const Index d = w_o.cols();
  if (k_neg <= 0 || rest.empty()) return Var::Constant(Matrix::Zero(0, d));
  const Var candidates = ad::L2NormalizeRows(ad::MatMul(ad::GatherRows(values, rest), w_o));
  const Matrix sims = candidates.value() * anchor.transpose();  // |rest| x 1
  std::vector<int> pick = TopKIndices(sims, k_neg);
  return ad::GatherRows(candidates, pick);
}

Var InfoNce(const std::vector<Var>& anchors, const std::vector<Var>& positives, const std::vector<Var>& pools,
            double tau, const Var& scale) {
  if (anchors.empty()) throw DegenerateBatch("InfoNCE needs at least one valid anchor");
  if (positives.size() != anchors.size() || pools.size() != anchors.size()) {
    throw ShapeMismatch("InfoNCE anchors, positives and pools differ in count");
  }
  std::vector<Var> terms;
  terms.reserve(anchors.size());
  for (size_t i = 0; i < anchors.size(); ++i) {
    Var logits = ad::MatMulNT(anchors[i], positives[i]);  // 1 x 1
    if (pools[i].rows() > 0) {
      const Var parts[] = {logits, ad::MatMulNT(anchors[i], pools[i])};
      logits = ad::ConcatCols(parts);
    }
    if (scale.defined()) logits = ad::MulScalar(logits, scale);
    logits = ad::Scale(logits, 1.0 / tau);
    terms.push_back(ad::Sub(ad::LogSumExpRows(logits), ad::SliceCols(logits, 0, 1)));
  }
  return ad::Mean(ad::ConcatRows(terms));
}

AlignmentResult RegionAlignmentLoss(const ctp::SegTokenStates& seg, const std::vector<Matrix>& z,
                                    const ctp::CalibratedPromptBank& bank, const AlignmentParams& params,
                                    const ctp::CtpParams* ctp_params) {
  const size_t B = seg.values.size();
  if (z.size() != B || bank.values.size() != B) throw ShapeMismatch("alignment batch sizes differ");
  const AlignmentConfig& cfg = params.config;

  struct Slot {
    size_t b;
    RegionAttention attn;
  };
  std::vector<Slot> slots;
  std::vector<Var> values(B);
  AlignmentResult out;
  for (size_t b = 0; b < B; ++b) {
    const Var& t = seg.values[b];
    if (seg.valid[b].size() != static_cast<size_t>(t.rows())) throw ShapeMismatch("validity mask length mismatch");
    if (bank.values[b].rows() != t.rows() * bank.k_bank) throw ShapeMismatch("prompt bank rows != M * K_bank");
    if (z[b].cols() != cfg.channels) throw ShapeMismatch("encoder channels differ from alignment config");
    const Var zc = Var::Constant(z[b]);
    const Var keys = ad::MatMul(zc, params.w_k);
    values[b] = ad::MatMul(zc, params.w_v);
    for (Index m = 0; m < t.rows(); ++m) {
      if (!seg.valid[b][static_cast<size_t>(m)]) continue;
      RegionAttention attn = AttendRegion(ad::SliceRows(t, m, 1), keys, cfg.k_pos, params.w_q);
      out.positives.push_back(ad::L2NormalizeRows(PositiveEmbedding(attn, values[b], params.w_o)));
      out.anchors.push_back(
          ad::L2NormalizeRows(ad::ColMean(ad::SliceRows(bank.values[b], m * bank.k_bank, bank.k_bank))));
      slots.push_back({b, std::move(attn)});
    }
  }
  for (size_t i = 0; i < slots.size(); ++i) {
    std::vector<Var> pool;
    for (size_t j = 0; j < slots.size(); ++j) {
      if (j != i) pool.push_back(out.positives[j]);
    }
    Var hard = HardNegatives(slots[i].attn, values[slots[i].b], params.w_o, out.anchors[i].value(), cfg.k_neg);
    if (hard.rows() > 0) pool.push_back(hard);
    out.pools.push_back(pool.empty() ? Var::Constant(Matrix::Zero(0, cfg.d_vis)) : ad::ConcatRows(pool));
    out.attention.push_back(slots[i].attn);
  }
  Var scale;
  if (ctp_params && ctp_params->config.use_logit_scale) scale = ctp_params->LogitScale();
  out.loss = InfoNce(out.anchors, out.positives, out.pools, cfg.tau, scale);
  return out;
}

}  // namespace walkgpt::align
