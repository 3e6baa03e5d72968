// Runs every acceptance criterion and prints one PASS/FAIL line for each.
// Exit status is nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "walkgpt/checkpoint.hpp"
#include "walkgpt/commands.hpp"
#include "walkgpt/curation.hpp"
#include "walkgpt/gradcheck.hpp"
#include "walkgpt/grammar.hpp"
#include "walkgpt/io.hpp"
#include "walkgpt/metrics.hpp"
#include "walkgpt/model.hpp"
#include "walkgpt/msqp.hpp"

namespace wg = walkgpt;
namespace ad = walkgpt::ad;
namespace md = walkgpt::model;
namespace fs = std::filesystem;
using ad::Matrix;
using ad::Var;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void Fail(const std::string& why) {
    if (pass) detail.clear();
    pass = false;
    if (!detail.empty()) detail += "; ";
    detail += why;
  }
};

// Desk architecture on one fixed batch of four; the step size is the only
// departure from the desk recipe.
md::ModelConfig OverfitConfig() {
  md::ModelConfig cfg = md::ModelConfig::Desk();
  cfg.batch_size = 4;
  cfg.lr = 2e-3;
  return cfg;
}

double Seconds(Clock::time_point since) { return std::chrono::duration<double>(Clock::now() - since).count(); }

std::string Fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// Mean total loss over a fixed set of examples, without gradients.
double EvalLoss(const md::WalkGptModel& m, const std::vector<md::Example>& examples) {
  ad::NoGradGuard guard;
  return m.Forward(examples).total.item();
}

Verdict GradientSuite() {
  Verdict v;
  const auto start = Clock::now();
  const auto results = wg::gradcheck::RunStandardSuite(wg::gradcheck::Options{});
  const double secs = Seconds(start);
  double worst = 0.0;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_rel_error);
    if (!r.passed) v.Fail(r.group + " max rel error " + Fmt("%.3e", r.max_rel_error));
  }
  if (secs >= 120.0) v.Fail("runtime " + Fmt("%.1f", secs) + " s");
  if (v.pass) v.detail = std::to_string(results.size()) + " groups, worst " + Fmt("%.2e", worst) + ", " + Fmt("%.1f", secs) + " s";
  return v;
}

Verdict OracleEquivalence() {
  Verdict v;
  constexpr double kTol = 1e-9;
  constexpr int kInstances = 100;
  ad::Rng rng(2024);
  auto check = [&](const char* what, double got, double want) {
    if (!(std::abs(got - want) <= kTol)) v.Fail(std::string(what) + " differs by " + Fmt("%.3e", std::abs(got - want)));
  };

  const fixtures::AlignmentDims dims;
  for (int i = 0; i < kInstances; ++i) {
    const auto c = fixtures::RandomAlignmentCase(rng, dims);
    check("region_alignment_loss", wg::align::RegionAlignmentLoss(c.seg, c.oracle_inputs.z, c.bank, c.params).loss.item(),
          oracle::RegionAlignmentLoss(c.oracle_inputs));
  }
  for (int i = 0; i < kInstances; ++i) {
    const int B = rng.UniformInt(1, 4), S = rng.UniformInt(3, 64), V = rng.UniformInt(2, 512);
    const auto batch = fixtures::RandomTokenBatch(rng, B, S, V);
    std::vector<Matrix> logits;
    std::vector<Var> vars;
    for (int b = 0; b < B; ++b) {
      logits.push_back(fixtures::RandomMatrix(S, V, rng, 4.0));
      vars.push_back(Var::Constant(logits.back()));
    }
    check("masked_ce", wg::objectives::MaskedCe(vars, batch).item(), oracle::MaskedCe(logits, batch, true));
  }
  for (int i = 0; i < kInstances; ++i) {
    const int n = rng.UniformInt(1, 4), h = rng.UniformInt(1, 64), w = rng.UniformInt(1, 64);
    std::vector<Matrix> logits, gt;
    std::vector<wg::objectives::MaskPair> pairs;
    for (int k = 0; k < n; ++k) {
      logits.push_back(fixtures::RandomMatrix(h, w, rng, 6.0));
      Matrix g(h, w);
      for (long e = 0; e < g.size(); ++e) g.data()[e] = rng.Uniform() < 0.4 ? 1.0 : 0.0;
      gt.push_back(g);
      pairs.push_back({Var::Constant(logits.back()), gt.back()});
    }
    check("dice_loss", wg::objectives::DiceLoss(pairs).item(), oracle::Dice(logits, gt, 1.0));
    check("bce_seg", wg::objectives::BceSeg(pairs).item(), oracle::Bce(logits, gt));
  }
  for (int i = 0; i < kInstances; ++i) {
    std::vector<wg::metrics::DepthPair> pairs;
    for (int k = rng.UniformInt(1, 256); k > 0; --k) pairs.push_back({rng.Uniform(0.0, 40.0), rng.Uniform(0.1, 30.0)});
    check("depth_accuracy", wg::metrics::DepthAccuracy(pairs), oracle::DepthAccuracy(pairs));
    check("abs_rel", wg::metrics::AbsRel(pairs), oracle::AbsRel(pairs));
  }
  for (int i = 0; i < kInstances; ++i) {
    const int h = rng.UniformInt(1, 64), w = rng.UniformInt(1, 64);
    wg::LabelGrid m(h, w);
    wg::DepthGrid d(h, w);
    for (size_t k = 0; k < m.data.size(); ++k) {
      m.data[k] = rng.UniformInt(0, 30);
      const double u = rng.Uniform();
      d.data[k] = u < 0.1 ? 0.0 : (u < 0.15 ? std::numeric_limits<double>::infinity() : rng.Uniform(0.1, 80.0));
    }
    const auto got = wg::curation::MinDepthPerClass(m, d);
    const auto want = oracle::MinDepthPerClass(m, d);
    if (got.size() != want.size()) {
      v.Fail("min_depth_per_class class sets differ");
      continue;
    }
    for (const auto& [cls, depth] : want) check("min_depth_per_class", got.count(cls) ? got.at(cls) : NAN, depth);
  }
  for (int i = 0; i < kInstances; ++i) {
    const int gh = 4 * rng.UniformInt(1, 4), gw = 4 * rng.UniformInt(1, 4);
    const Matrix f = fixtures::RandomMatrix(gh * gw, rng.UniformInt(1, 128), rng, 3.0);
    const auto banks = wg::msqp::MultiscalePool(Var::Constant(f), gh, gw);
    check("multiscale_pool x2", oracle::MaxAbsDiff(banks.x2.value(), oracle::AvgPool(f, gh, gw, 2)), 0.0);
    check("multiscale_pool x4", oracle::MaxAbsDiff(banks.x4.value(), oracle::AvgPool(f, gh, gw, 4)), 0.0);
    check("multiscale_pool x1", oracle::MaxAbsDiff(banks.x1.value(), f), 0.0);
  }
  if (v.pass) v.detail = "8 functions x 100 instances within 1e-9";
  return v;
}

Verdict ShapeInvariants() {
  Verdict v;
  const md::ModelConfig desk = md::ModelConfig::Desk();
  wg::msqp::MsqpConfig mc;
  mc.channels = desk.channels;
  mc.d_proj = desk.d_proj;
  mc.hidden = desk.hidden;
  mc.num_heads = desk.msqp_heads;
  mc.num_layers = desk.msqp_layers;
  ad::ParameterStore store;
  ad::Rng rng(31);
  const auto params = wg::msqp::MsqpParams::Create(mc, store, rng);
  int grids = 0;
  for (int gh = 4; gh <= 24; gh += 4) {
    for (int gw = 4; gw <= 24; gw += 4) {
      wg::msqp::FeatureGrid grid;
      grid.grid_h = gh;
      grid.grid_w = gw;
      grid.values = {fixtures::RandomMatrix(gh * gw, mc.channels, rng)};
      wg::msqp::AttentionTrace trace;
      const auto out = wg::msqp::MsqpForward(params, grid, &trace);
      const Matrix& t = out.values[0].value();
      if (t.rows() != 36) v.Fail("grid " + std::to_string(gh) + "x" + std::to_string(gw) + " emitted " + std::to_string(t.rows()));
      if (t.bottomRows(4).cwiseAbs().maxCoeff() != 0.0) v.Fail("pad rows not zero");
      for (const Matrix& w : trace.weights) {
        for (long r = 0; r < w.rows(); ++r) {
          if (std::abs(w.row(r).sum() - 1.0) > 1e-6) v.Fail("attention row sum " + Fmt("%.9f", w.row(r).sum()));
        }
      }
      ++grids;
    }
  }

  // CTP: the flat MLP output regroups into K sub-embeddings and back exactly,
  // and each token's group depends on that token alone.
  auto data = fixtures::MakeDeskData(desk, 12, 77);
  const auto& ctp = data.model->ctp();
  const int K = desk.k_bank;
  const Matrix tokens = fixtures::RandomMatrix(5, desk.hidden, rng);
  const Matrix bank = wg::ctp::CtpForwardSample(ctp, Var::Constant(tokens)).value();
  if (bank.rows() != 5 * K || bank.cols() != desk.d_vis) v.Fail("CTP bank shape");
  const Var flat = ad::Reshape(Var::Constant(bank), 5, K * desk.d_vis);
  if (ad::Reshape(flat, 5 * K, desk.d_vis).value() != bank) v.Fail("CTP regroup not lossless");
  Matrix moved = tokens;
  moved.row(2) = fixtures::RandomMatrix(1, desk.hidden, rng);
  const Matrix bank2 = wg::ctp::CtpForwardSample(ctp, Var::Constant(moved)).value();
  for (int m = 0; m < 5; ++m) {
    const bool same = bank.middleRows(m * K, K) == bank2.middleRows(m * K, K);
    if (same != (m != 2)) v.Fail("CTP group " + std::to_string(m) + " coupling");
  }

  // One mask per <SEG>.
  int masks = 0;
  {
    ad::NoGradGuard guard;
    const auto r = data.model->Forward(data.examples);
    for (size_t i = 0; i < data.examples.size(); ++i) {
      const auto& ids = data.examples[i].tokens.input_ids;
      const auto segs = static_cast<size_t>(std::count(ids.begin(), ids.end(), wg::Vocabulary::kSeg));
      if (r.mask_logits[i].size() != segs) v.Fail("sample " + std::to_string(i) + " mask count");
      masks += static_cast<int>(segs);
    }
  }
  if (v.pass) {
    v.detail = std::to_string(grids) + " grids emit 36 tokens, CTP regroup exact, " + std::to_string(masks) +
               " masks for " + std::to_string(masks) + " <SEG> tokens";
  }
  return v;
}

Verdict GrammarSuite() {
  Verdict v;
  ad::Rng rng(4);
  int round_trips = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto r = fixtures::RandomResponse(rng);
    const std::string text = wg::grammar::SerializeResponse(r);
    try {
      const auto back = wg::grammar::ParseResponse(text);
      if (!wg::grammar::SameContent(r, back) || wg::grammar::SerializeResponse(back) != text) {
        v.Fail("round trip mismatch");
      } else {
        ++round_trips;
      }
    } catch (const wg::Error& e) {
      v.Fail(std::string("parse failed: ") + e.what());
    }
  }
  const auto samples = wg::synthetic::GenerateSamples(300, 8);
  std::vector<wg::curation::VQASample> plain;
  for (const auto& s : samples) plain.push_back(s.sample);
  const auto report = wg::curation::VerifyDataset(plain);
  size_t violations = 0;
  for (const auto& s : report.samples) violations += s.violations.size();
  if (violations != 0) v.Fail(std::to_string(violations) + " violations in generated samples");
  if (v.pass) {
    v.detail = std::to_string(round_trips) + " round trips, " + std::to_string(plain.size()) + " samples with 0 violations";
  }
  return v;
}

Verdict DepthBoundary() {
  Verdict v;
  using wg::metrics::AbsRel;
  using wg::metrics::DepthAccuracy;
  if (DepthAccuracy({{2.0, 1.0}}) != 100.0) v.Fail("pred = 2 x gt not counted");
  if (DepthAccuracy({{0.5, 1.0}}) != 100.0) v.Fail("pred = 0.5 x gt not counted");
  const double four = DepthAccuracy({{1.0, 1.0}, {0.5, 1.0}, {0.49, 1.0}, {3.0, 1.0}});
  if (four != 50.0) v.Fail("4-pair fixture " + Fmt("%.6f", four));
  const double rel = AbsRel({{1.5, 1.0}});
  if (rel != 50.0) v.Fail("AbsRel " + Fmt("%.6f", rel));
  if (v.pass) v.detail = "inclusive bounds hold, fixture 50.0, AbsRel 50.0";
  return v;
}

Verdict TrainingSignal() {
  Verdict v;
  std::ostringstream detail;
  {
    md::ModelConfig cfg = md::ModelConfig::Desk();
    auto data = fixtures::MakeDeskData(cfg, 16, 100);
    const double before = EvalLoss(*data.model, data.examples);
    md::TrainState state{md::AdamW::FromConfig(cfg), 0};
    for (int i = 0; i < 50; ++i) md::TrainStep(*data.model, state, data.examples);
    const double after = EvalLoss(*data.model, data.examples);
    if (!(after < before)) v.Fail("50 desk steps: loss " + Fmt("%.4f", before) + " -> " + Fmt("%.4f", after));
    detail << "50 steps " << Fmt("%.4f", before) << " -> " << Fmt("%.4f", after);
  }
  {
    const md::ModelConfig cfg = OverfitConfig();
    auto data = fixtures::MakeDeskData(cfg, 4, 200);
    md::TrainState state{md::AdamW::FromConfig(cfg), 0};
    const auto start = Clock::now();
    bool reached = false;
    md::TokenAccuracy acc;
    double miou = 0.0;
    while (state.step < 500 && Seconds(start) < 600.0) {
      md::TrainStep(*data.model, state, data.examples);
      if (state.step % 25 != 0) continue;
      acc = md::AnswerTokenAccuracy(*data.model, data.examples);
      miou = md::MeanMaskIou(*data.model, data.examples);
      if (acc.value() >= 0.99 && miou >= 0.9 && acc.distance_exact) {
        reached = true;
        break;
      }
    }
    const double secs = Seconds(start);
    detail << "; overfit step " << state.step << " acc " << Fmt("%.4f", acc.value()) << " miou " << Fmt("%.3f", miou)
           << " distance " << (acc.distance_exact ? "exact" : "inexact") << " " << Fmt("%.0f", secs) << " s";
    if (!reached) v.Fail("overfit not reached");
  }
  if (v.pass) {
    v.detail = detail.str();
  } else {
    v.detail += " (" + detail.str() + ")";
  }
  return v;
}

Verdict Ablations() {
  Verdict v;
  struct Variant {
    const char* name;
    std::function<void(md::ModelConfig&)> apply;
  };
  const Variant variants[] = {
      {"mlp_projector", [](md::ModelConfig& c) { c.projector = md::ProjectorKind::kMlp; }},
      {"no_distance", [](md::ModelConfig& c) { c.drop_distance_block = true; }},
      {"no_nce", [](md::ModelConfig& c) { c.weights.nce = 0.0; }},
      {"frozen_lm", [](md::ModelConfig& c) { c.freeze_lm = true; }},
  };
  std::ostringstream detail;
  for (const Variant& var : variants) {
    md::ModelConfig cfg = OverfitConfig();
    var.apply(cfg);
    auto data = fixtures::MakeDeskData(cfg, 4, 300);
    const double before = EvalLoss(*data.model, data.examples);
    md::TrainState state{md::AdamW::FromConfig(cfg), 0};
    for (int i = 0; i < 30; ++i) md::TrainStep(*data.model, state, data.examples);
    const double after = EvalLoss(*data.model, data.examples);
    if (!(after < before)) v.Fail(std::string(var.name) + " loss did not decrease");
    detail << (detail.tellp() > 0 ? ", " : "") << var.name << " " << Fmt("%.3f", before) << "->" << Fmt("%.3f", after);
  }
  if (v.pass) v.detail = detail.str();
  return v;
}

int Run(int (*fn)(const wg::commands::RunConfig&, std::ostream&, std::ostream&), const wg::commands::RunConfig& c) {
  std::ostringstream out, err;
  return fn(c, out, err);
}

Verdict Determinism() {
  Verdict v;
  namespace cmd = wg::commands;
  unsetenv("WALK_QGEN_ENDPOINT");
  const fs::path root = fs::temp_directory_path() / "walkgpt_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  auto same = [&](const fs::path& a, const fs::path& b) {
    if (wg::io::ReadFile(a) != wg::io::ReadFile(b)) v.Fail(a.filename().string() + " differs between runs");
  };

  cmd::RunConfig synth;
  synth.out = (root / "session").string();
  synth.frames = 16;
  synth.seed = 11;
  if (Run(cmd::Synth, synth) != 0) v.Fail("synth failed");

  for (const char* run : {"a", "b"}) {
    cmd::RunConfig curate;
    curate.input = (root / "session").string();
    curate.out = (root / (std::string("data_") + run)).string();
    curate.frames = 16;
    curate.seed = 1;
    if (Run(cmd::Curate, curate) != 0) v.Fail("curate failed");

    cmd::RunConfig train;
    train.input = (root / "data_a").string();
    train.out = (root / (std::string("train_") + run)).string();
    train.steps = 4;
    train.seed = 2;
    if (Run(cmd::Train, train) != 0) v.Fail("train failed");

    cmd::RunConfig eval;
    eval.input = (root / "data_a").string();
    eval.checkpoint = (root / (std::string("train_") + run) / "checkpoint.wgpt").string();
    eval.out = (root / (std::string("eval_") + run)).string();
    eval.limit = 4;
    eval.per_sample_csv = true;
    if (Run(cmd::Eval, eval) != 0) v.Fail("eval failed");
  }
  same(root / "data_a" / "samples.jsonl", root / "data_b" / "samples.jsonl");
  same(root / "data_a" / "curation_summary.json", root / "data_b" / "curation_summary.json");
  same(root / "train_a" / "train_log.jsonl", root / "train_b" / "train_log.jsonl");
  same(root / "train_a" / "checkpoint.wgpt", root / "train_b" / "checkpoint.wgpt");
  same(root / "eval_a" / "metrics.json", root / "eval_b" / "metrics.json");
  same(root / "eval_a" / "per_sample.csv", root / "eval_b" / "per_sample.csv");

  // Resume: 2 steps, checkpoint, 2 more steps against 4 uninterrupted steps.
  cmd::RunConfig half;
  half.input = (root / "data_a").string();
  half.out = (root / "resumed").string();
  half.steps = 2;
  half.seed = 2;
  if (Run(cmd::Train, half) != 0) v.Fail("train (first half) failed");
  cmd::RunConfig rest = half;
  rest.steps = 4;
  rest.checkpoint = (root / "resumed" / "checkpoint.wgpt").string();
  if (Run(cmd::Train, rest) != 0) v.Fail("train (resumed) failed");
  double worst = 0.0;
  if (v.pass) {
    const auto straight = wg::checkpoint::Load(root / "train_a" / "checkpoint.wgpt");
    const auto resumed = wg::checkpoint::Load(root / "resumed" / "checkpoint.wgpt");
    const auto& pa = straight.model->params().entries();
    const auto& pb = resumed.model->params().entries();
    if (pa.size() != pb.size()) v.Fail("resumed parameter count differs");
    for (size_t i = 0; i < std::min(pa.size(), pb.size()); ++i) {
      worst = std::max(worst, oracle::MaxAbsDiff(pa[i].second.value(), pb[i].second.value()));
    }
    std::istringstream la(wg::io::ReadFile(root / "train_a" / "train_log.jsonl"));
    std::istringstream lb(wg::io::ReadFile(root / "resumed" / "train_log.jsonl"));
    std::string a, b;
    int lines = 0;
    while (std::getline(la, a) && std::getline(lb, b)) {
      const auto ja = nlohmann::json::parse(a);
      const auto jb = nlohmann::json::parse(b);
      worst = std::max(worst, std::abs(ja.at("total").get<double>() - jb.at("total").get<double>()));
      ++lines;
    }
    if (lines != 4) v.Fail("resumed log has " + std::to_string(lines) + " comparable lines");
    if (worst > 1e-6) v.Fail("resumed run deviates by " + Fmt("%.3e", worst));
  }
  if (v.pass) v.detail = "curate/train/eval byte-identical; resume max deviation " + Fmt("%.1e", worst);
  return v;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    Verdict (*run)();
  };
  const Criterion criteria[] = {
      {"gradient suite", GradientSuite},       {"oracle equivalence", OracleEquivalence},
      {"shape invariants", ShapeInvariants},   {"grammar suite", GrammarSuite},
      {"depth metric boundary", DepthBoundary}, {"training signal", TrainingSignal},
      {"ablation hooks", Ablations},           {"determinism", Determinism},
  };
  int failed = 0;
  int index = 0;
  for (const Criterion& c : criteria) {
    ++index;
    Verdict v;
    const auto start = Clock::now();
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.Fail(std::string("exception: ") + e.what());
    }
    std::printf("%s [%d] %s: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", index, c.name, v.detail.c_str(), Seconds(start));
    std::fflush(stdout);
    failed += v.pass ? 0 : 1;
  }
  std::printf("%d/%d criteria passed\n", index - failed, index);
  return failed == 0 ? 0 : 1;
}
