#include "walkgpt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "walkgpt/ctp.hpp"
#include "walkgpt/grammar.hpp"
#include "walkgpt/model.hpp"
#include "walkgpt/msqp.hpp"
#include "walkgpt/objectives.hpp"
#include "walkgpt/region_alignment.hpp"

namespace walkgpt::gradcheck {

using ad::Matrix;
using ad::Var;

double RelativeError(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GroupResult CheckGroup(const std::string& group, const std::function<Var()>& loss,
                       const std::vector<std::pair<std::string, Var>>& params, const Options& options) {
  for (const auto& [name, p] : params) p.node()->grad.resize(0, 0);
  Backward(loss());
  std::vector<Matrix> analytic;
  for (const auto& [name, p] : params) analytic.push_back(p.grad());
  if ((options.corrupt_group == group || options.corrupt_group == "all") && !analytic.empty() &&
      analytic.front().size() > 0) {
    analytic.front()(0, 0) += 1e-2 * (1.0 + std::abs(analytic.front()(0, 0)));
  }

  GroupResult result;
  result.group = group;
  ad::NoGradGuard no_grad;
  for (size_t k = 0; k < params.size(); ++k) {
    const Var& p = params[k].second;
    Matrix& value = p.node()->value;
    const Eigen::Index n = value.size();
    const Eigen::Index stride = std::max<Eigen::Index>(1, (n + options.max_entries - 1) / options.max_entries);
    ParamError err;
    err.name = params[k].first;
    for (Eigen::Index i = 0; i < n; i += stride) {
      double& x = value.data()[i];
      const double saved = x;
      x = saved + options.step;
      const double plus = loss().item();
      x = saved - options.step;
      const double minus = loss().item();
      x = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double rel = RelativeError(analytic[k].data()[i], numeric, options.denominator_floor);
      err.max_rel_error = std::max(err.max_rel_error, std::isfinite(rel) ? rel : 1e300);
      ++err.checked;
    }
    result.max_rel_error = std::max(result.max_rel_error, err.max_rel_error);
    result.params.push_back(err);
  }
  for (const auto& [name, p] : params) p.node()->grad.resize(0, 0);
  result.passed = result.max_rel_error < options.tolerance;
  return result;
}

namespace {

std::vector<std::pair<std::string, Var>> WithPrefix(const ad::ParameterStore& store, const std::string& prefix) {
  std::vector<std::pair<std::string, Var>> out;
  for (const auto& [name, v] : store.entries()) {
    if (name.rfind(prefix, 0) == 0 && v.requires_grad()) out.emplace_back(name, v);
  }
  return out;
}

Matrix RandomMatrix(Eigen::Index r, Eigen::Index c, double scale, ad::Rng& rng) {
  return ad::UniformMatrix(r, c, scale, rng);
}

GroupResult MsqpGroup(const Options& o) {
  ad::Rng rng(o.seed + 101);
  ad::ParameterStore store;
  msqp::MsqpConfig cfg;
  cfg.channels = 8;
  cfg.d_proj = 16;
  cfg.hidden = 16;
  const msqp::MsqpParams params = msqp::MsqpParams::Create(cfg, store, rng);
  // Nonzero biases so their gradients are exercised away from the init point.
  for (auto& [name, v] : store.entries()) {
    if (name.find(".bias") != std::string::npos || name.find(".beta") != std::string::npos ||
        name.find(".gate.b") != std::string::npos) {
      v.mutable_value() = RandomMatrix(v.rows(), v.cols(), 0.2, rng);
    }
  }
  const Matrix z = RandomMatrix(64, 8, 1.0, rng);
  // A signed readout keeps the loss small; a plain sum is large enough that
  // difference roundoff swamps the zero key-bias gradients.
  const Matrix readout = RandomMatrix(cfg.output_tokens(), cfg.hidden, 0.1, rng);
  return CheckGroup(
      "msqp",
      [&] { return ad::Sum(ad::Mul(msqp::ForwardSample(params, z, 8, 8), Var::Constant(readout))); },
      WithPrefix(store, "msqp."), o);
}

GroupResult CtpGroup(const Options& o) {
  ad::Rng rng(o.seed + 202);
  ad::ParameterStore store;
  ctp::CtpConfig cfg;
  cfg.hidden = 12;
  cfg.d_vis = 6;
  cfg.k_bank = 4;
  const ctp::CtpParams params = ctp::CtpParams::Create(cfg, store, rng);
  store.entries().back().second.mutable_value()(0, 0) = 0.3;  // log logit scale
  params.bias_bank.node()->value = RandomMatrix(4, 6, 0.5, rng);
  const Matrix t = RandomMatrix(3, 12, 1.0, rng);
  const Matrix weights = RandomMatrix(12, 6, 1.0, rng);
  // sum(E) plus a weighted readout; the logit scale multiplies the readout so
  // its gradient is exercised.
  return CheckGroup(
      "ctp",
      [&] {
        const Var e = ctp::CtpForwardSample(params, Var::Constant(t));
        return ad::Add(ad::Sum(e), ad::MulScalar(ad::Sum(ad::Mul(e, Var::Constant(weights))), params.LogitScale()));
      },
      WithPrefix(store, "ctp."), o);
}

GroupResult AlignmentGroup(const Options& o) {
  ad::Rng rng(o.seed + 303);
  ad::ParameterStore store;
  ctp::CtpConfig cc;
  cc.hidden = 12;
  cc.d_vis = 8;
  cc.k_bank = 2;
  cc.use_logit_scale = true;
  const ctp::CtpParams cp = ctp::CtpParams::Create(cc, store, rng);
  align::AlignmentConfig ac;
  ac.hidden = 12;
  ac.channels = 6;
  ac.d_vis = 8;
  ac.k_pos = 4;
  ac.k_neg = 3;
  ac.tau = 0.5;  // keeps logits moderate so differences stay well resolved
  const align::AlignmentParams ap = align::AlignmentParams::Create(ac, store, rng);
  ctp::SegTokenStates seg;
  std::vector<Matrix> z;
  for (int b = 0; b < 2; ++b) {
    seg.values.push_back(Var::Constant(RandomMatrix(2, 12, 1.0, rng)));
    seg.valid.push_back({true, true});
    z.push_back(RandomMatrix(16, 6, 1.0, rng));
  }
  std::vector<std::pair<std::string, Var>> params = WithPrefix(store, "ctp.");
  for (auto& p : WithPrefix(store, "align.")) params.push_back(p);
  return CheckGroup(
      "region_alignment",
      [&] { return align::RegionAlignmentLoss(seg, z, ctp::CtpForward(cp, seg), ap, &cp).loss; }, params, o);
}

struct TokenFixture {
  objectives::TokenBatch batch;
  std::vector<Matrix> inputs;
  Var w;
};

TokenFixture MakeTokenFixture(ad::Rng& rng) {
  TokenFixture f;
  const int V = 11;
  const int S = 7;
  const int D = 5;
  f.w = Var::Leaf(RandomMatrix(D, V, 1.0, rng));
  for (int b = 0; b < 2; ++b) {
    objectives::TokenSequence s;
    for (int t = 0; t < S; ++t) {
      s.input_ids.push_back(rng.UniformInt(0, V - 1));
      s.answer_mask.push_back(t >= 2);
      s.span_labels.push_back(t >= 4 ? objectives::SpanLabel::kDistance : objectives::SpanLabel::kPhrase);
    }
    f.batch.push_back(s);
    f.inputs.push_back(RandomMatrix(S, D, 1.0, rng));
  }
  return f;
}

std::vector<Var> FixtureLogits(const TokenFixture& f) {
  std::vector<Var> logits;
  for (const Matrix& x : f.inputs) logits.push_back(ad::MatMul(Var::Constant(x), f.w));
  return logits;
}

GroupResult MaskedCeGroup(const Options& o) {
  ad::Rng rng(o.seed + 404);
  const TokenFixture f = MakeTokenFixture(rng);
  return CheckGroup("masked_ce", [&] { return objectives::MaskedCe(FixtureLogits(f), f.batch); }, {{"proj", f.w}}, o);
}

GroupResult SpanCeGroup(const Options& o) {
  ad::Rng rng(o.seed + 505);
  const TokenFixture f = MakeTokenFixture(rng);
  return CheckGroup(
      "span_ce",
      [&] { return objectives::SpanCe(FixtureLogits(f), f.batch, objectives::SpanLabel::kDistance).loss; },
      {{"proj", f.w}}, o);
}

GroupResult MaskLossGroup(const Options& o, bool dice) {
  ad::Rng rng(o.seed + (dice ? 606 : 707));
  std::vector<Var> leaves;
  std::vector<Matrix> gts;
  for (int k = 0; k < 2; ++k) {
    leaves.push_back(Var::Leaf(RandomMatrix(8, 8, 2.0, rng)));
    Matrix g(8, 8);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.Uniform() < 0.4 ? 1.0 : 0.0;
    gts.push_back(g);
  }
  auto loss = [&] {
    std::vector<objectives::MaskPair> pairs;
    for (size_t k = 0; k < leaves.size(); ++k) pairs.push_back({leaves[k], gts[k]});
    return dice ? objectives::DiceLoss(pairs) : objectives::BceSeg(pairs);
  };
  return CheckGroup(dice ? "dice" : "bce", loss, {{"mask0", leaves[0]}, {"mask1", leaves[1]}}, o);
}

model::ModelConfig TinyConfig(uint64_t seed) {
  model::ModelConfig c;
  c.hidden = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  c.channels = 8;
  c.d_proj = 16;
  c.d_vis = 8;
  c.k_bank = 2;
  c.image_size = 8;
  c.grid = 4;
  c.max_seq_len = 64;
  c.seed = seed;
  return c;
}

io::Image RandomImage(int n, ad::Rng& rng) {
  io::Image img(n, n, 3);
  for (uint8_t& v : img.data) v = static_cast<uint8_t>(rng.UniformInt(0, 255));
  return img;
}

GroupResult DecoderGroup(const Options& o) {
  ad::Rng rng(o.seed + 808);
  model::WalkGptModel m(TinyConfig(o.seed), Vocabulary());
  // Move biases off zero so every decoder array carries signal.
  for (auto& [name, v] : m.params().entries()) {
    if (name == "decoder.b_pix" || name == "decoder.bias" || name == "ctp.bias_bank") {
      v.mutable_value() = RandomMatrix(v.rows(), v.cols(), 0.3, rng);
    }
  }
  const Matrix z = m.EncodeImage(RandomImage(8, rng));
  const Matrix t = RandomMatrix(2, 16, 1.0, rng);
  std::vector<Matrix> gts;
  for (int k = 0; k < 2; ++k) {
    Matrix g(8, 8);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.Uniform() < 0.5 ? 1.0 : 0.0;
    gts.push_back(g);
  }
  auto loss = [&] {
    const model::ImageTokens image = m.ProjectImage(z);
    const Var e = ctp::CtpForwardSample(m.ctp(), Var::Constant(t));
    const std::vector<Var> masks = m.DecodeMasks(e, 2, z, image);
    std::vector<objectives::MaskPair> pairs;
    for (size_t k = 0; k < masks.size(); ++k) pairs.push_back({masks[k], gts[k]});
    return ad::Add(objectives::DiceLoss(pairs), objectives::BceSeg(pairs));
  };
  std::vector<std::pair<std::string, Var>> params = WithPrefix(m.params(), "decoder.");
  for (auto& p : WithPrefix(m.params(), "ctp.")) {
    if (p.first != "ctp.log_logit_scale") params.push_back(p);
  }
  return CheckGroup("decoder", loss, params, o);
}

GroupResult LanguageModelGroup(const Options& o) {
  ad::Rng rng(o.seed + 909);
  model::WalkGptModel m(TinyConfig(o.seed), Vocabulary());
  const Matrix z = m.EncodeImage(RandomImage(8, rng));
  objectives::TokenSequence s;
  for (int t = 0; t < 10; ++t) {
    s.input_ids.push_back(rng.UniformInt(0, m.vocab().size() - 1));
    s.answer_mask.push_back(t >= 3);
  }
  const objectives::TokenBatch batch = {s};
  auto loss = [&] {
    const model::LmOutput out = m.LmForward(s.input_ids, m.ProjectImage(z));
    // Scaled down so difference roundoff stays clear of the zero key-bias gradients.
    return ad::Scale(objectives::MaskedCe({out.logits}, batch), 0.1);
  };
  std::vector<std::pair<std::string, Var>> params = WithPrefix(m.params(), "lm.");
  return CheckGroup("language_model", loss, params, o);
}

}  // namespace

std::vector<GroupResult> RunStandardSuite(const Options& options) {
  std::vector<GroupResult> out;
  out.push_back(MsqpGroup(options));
  out.push_back(CtpGroup(options));
  out.push_back(AlignmentGroup(options));
  out.push_back(MaskedCeGroup(options));
  out.push_back(SpanCeGroup(options));
  out.push_back(MaskLossGroup(options, true));
  out.push_back(MaskLossGroup(options, false));
  out.push_back(DecoderGroup(options));
  out.push_back(LanguageModelGroup(options));
  return out;
}

std::string FormatTable(const std::vector<GroupResult>& results) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-18s %-40s %12s %8s\n", "group", "parameter", "max_rel_err", "status");
  out << line;
  for (const GroupResult& g : results) {
    for (const ParamError& p : g.params) {
      std::snprintf(line, sizeof(line), "%-18s %-40s %12.3e %8s\n", g.group.c_str(), p.name.c_str(), p.max_rel_error,
                    "");
      out << line;
    }
    std::snprintf(line, sizeof(line), "%-18s %-40s %12.3e %8s\n", g.group.c_str(), "(all)", g.max_rel_error,
                  g.passed ? "PASS" : "FAIL");
    out << line;
  }
  return out.str();
}

}  // namespace walkgpt::gradcheck
