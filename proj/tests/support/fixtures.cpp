#include "fixtures.hpp"

#include <cmath>
#include <set>
#include <string>

namespace fixtures {

namespace wg = walkgpt;

Matrix RandomMatrix(long rows, long cols, Rng& rng, double scale) {
  Matrix m(rows, cols);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = rng.Uniform(-scale, scale);
  return m;
}

wg::grammar::StructuredResponse RandomResponse(Rng& rng) {
  static const char* kWords[] = {"curb",  "wide",   "bus",   "shelter", "ramp", "narrow", "gravel", "bench",
                                 "lane",  "bright", "store", "front",   "ped",  "zone",   "kerb",   "metal",
                                 "grate", "corner", "Tall",  "left",    "side", "stone",  "path",   "lamp"};
  const int n_words = static_cast<int>(std::size(kWords));
  auto phrase = [&](int max_words) {
    std::string s;
    const int n = rng.UniformInt(1, max_words);
    for (int i = 0; i < n; ++i) {
      if (i) s += ' ';
      s += kWords[rng.UniformInt(0, n_words - 1)];
    }
    return s;
  };

  wg::grammar::StructuredResponse r;
  r.assessment = phrase(12);
  if (rng.Uniform() < 0.3) r.assessment += ", with care.";
  const int n_phrases = rng.UniformInt(0, 6);
  std::set<std::string> used;
  for (int k = 0; k < n_phrases; ++k) {
    wg::grammar::GroundedPhrase p;
    p.phrase = phrase(3);
    p.accessibility = rng.Uniform() < 0.5 ? wg::Accessibility::kAccessible : wg::Accessibility::kHarmful;
    p.seg_index = k;
    r.phrases.push_back(p);
  }
  for (const auto& p : r.phrases) {
    if (rng.Uniform() < 0.2) continue;
    if (!used.insert(wg::grammar::NormalizeName(p.phrase)).second) continue;
    r.distances.push_back({p.phrase, rng.UniformInt(0, 400) / 10.0});
  }
  return r;
}

wg::objectives::TokenBatch RandomTokenBatch(Rng& rng, int batch, int seq_len, int vocab) {
  wg::objectives::TokenBatch out;
  for (int b = 0; b < batch; ++b) {
    wg::objectives::TokenSequence s;
    const int prompt = rng.UniformInt(1, seq_len - 2);
    for (int t = 0; t < seq_len; ++t) {
      s.input_ids.push_back(rng.UniformInt(0, vocab - 1));
      s.answer_mask.push_back(t >= prompt);
    }
    out.push_back(std::move(s));
  }
  return out;
}

AlignmentCase RandomAlignmentCase(Rng& rng, const AlignmentDims& dims) {
  AlignmentCase c;
  const int L = dims.grid * dims.grid;
  wg::align::AlignmentConfig cfg;
  cfg.hidden = dims.hidden;
  cfg.channels = dims.channels;
  cfg.d_vis = dims.d_vis;
  cfg.tau = dims.tau;
  cfg.k_pos = dims.k_pos;
  cfg.k_neg = dims.k_neg;
  c.params.config = cfg;
  auto leaf = [&](long r, long k, double s) { return wg::ad::Var::Leaf(RandomMatrix(r, k, rng, s)); };
  c.params.w_q = leaf(dims.hidden, dims.d_vis, 1.0 / std::sqrt(double(dims.hidden)));
  c.params.w_k = leaf(dims.channels, dims.d_vis, 1.0 / std::sqrt(double(dims.channels)));
  c.params.w_v = leaf(dims.channels, dims.d_vis, 1.0 / std::sqrt(double(dims.channels)));
  c.params.w_o = leaf(dims.d_vis, dims.d_vis, 1.0 / std::sqrt(double(dims.d_vis)));
  c.bank.k_bank = dims.k_bank;

  oracle::AlignmentInputs& o = c.oracle_inputs;
  o.k_bank = dims.k_bank;
  o.w_q = c.params.w_q.value();
  o.w_k = c.params.w_k.value();
  o.w_v = c.params.w_v.value();
  o.w_o = c.params.w_o.value();
  o.tau = dims.tau;
  o.k_pos = dims.k_pos;
  o.k_neg = dims.k_neg;

  for (int b = 0; b < dims.batch; ++b) {
    const int M = rng.UniformInt(1, dims.max_m);
    const Matrix t = RandomMatrix(M, dims.hidden, rng, 1.0);
    const Matrix z = RandomMatrix(L, dims.channels, rng, 1.0);
    const Matrix e = RandomMatrix(M * dims.k_bank, dims.d_vis, rng, 1.0);
    std::vector<bool> valid(static_cast<size_t>(M), true);
    // Occasionally pad the last slot; slot 0 always stays valid.
    if (M > 1 && rng.Uniform() < 0.3) valid[static_cast<size_t>(M - 1)] = false;
    c.seg.values.push_back(wg::ad::Var::Constant(t));
    c.seg.valid.push_back(valid);
    c.bank.values.push_back(wg::ad::Var::Constant(e));
    std::vector<bool> row_valid;
    for (bool v : valid) row_valid.insert(row_valid.end(), static_cast<size_t>(dims.k_bank), v);
    c.bank.valid.push_back(row_valid);
    o.seg.push_back(t);
    o.valid.push_back(valid);
    o.z.push_back(z);
    o.bank.push_back(e);
  }
  return c;
}

DeskData MakeDeskData(const wg::model::ModelConfig& config, int count, uint64_t data_seed) {
  DeskData d;
  wg::synthetic::SceneSpec spec;
  spec.image_size = config.image_size;
  spec.grid = config.grid;
  d.samples = wg::synthetic::GenerateSamples(count, data_seed, spec);
  std::vector<wg::curation::VQASample> plain;
  for (const auto& s : d.samples) plain.push_back(s.sample);
  d.model = std::make_unique<wg::model::WalkGptModel>(config, wg::model::BuildVocabulary(plain, config.vocab_size));
  for (const auto& s : d.samples) d.examples.push_back(d.model->MakeExample(s.sample, s.rgb));
  return d;
}

wg::model::ModelConfig TinyConfig() {
  wg::model::ModelConfig c;
  c.hidden = 32;
  c.n_layers = 1;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  c.channels = 16;
  c.d_proj = 32;
  c.d_vis = 16;
  c.k_bank = 2;
  c.image_size = 32;
  c.grid = 8;
  c.msqp_heads = 4;
  c.msqp_layers = 1;
  c.k_pos = 8;
  c.k_neg = 4;
  c.batch_size = 2;
  return c;
}

}  // namespace fixtures
