#pragma once

#include <memory>
#include <vector>

#include "oracles.hpp"
#include "walkgpt/ctp.hpp"
#include "walkgpt/grammar.hpp"
#include "walkgpt/model.hpp"
#include "walkgpt/region_alignment.hpp"
#include "walkgpt/synthetic.hpp"

namespace fixtures {

using walkgpt::ad::Matrix;
using walkgpt::ad::Rng;

Matrix RandomMatrix(long rows, long cols, Rng& rng, double scale = 1.0);

// A response satisfying every grammar invariant, with distances on the
// 0.1 m grid so that serialization is lossless.
walkgpt::grammar::StructuredResponse RandomResponse(Rng& rng);

// Random token batch over vocab [0, vocab) with non-empty answer regions.
walkgpt::objectives::TokenBatch RandomTokenBatch(Rng& rng, int batch, int seq_len, int vocab);

// Region alignment inputs in both library and oracle form.
struct AlignmentCase {
  oracle::AlignmentInputs oracle_inputs;
  walkgpt::ctp::SegTokenStates seg;
  walkgpt::ctp::CalibratedPromptBank bank;
  walkgpt::align::AlignmentParams params;
};
struct AlignmentDims {
  int batch = 2;
  int max_m = 3;
  int grid = 16;
  int hidden = 128;
  int channels = 64;
  int d_vis = 32;
  int k_bank = 4;
  int k_pos = 32;
  int k_neg = 8;
  double tau = 0.07;
};
AlignmentCase RandomAlignmentCase(Rng& rng, const AlignmentDims& dims);

// Synthetic samples plus a model whose vocabulary covers them.
struct DeskData {
  std::vector<walkgpt::synthetic::SyntheticSample> samples;
  std::unique_ptr<walkgpt::model::WalkGptModel> model;
  std::vector<walkgpt::model::Example> examples;
};
DeskData MakeDeskData(const walkgpt::model::ModelConfig& config, int count, uint64_t data_seed);

// A reduced configuration for fast unit tests.
walkgpt::model::ModelConfig TinyConfig();

}  // namespace fixtures
