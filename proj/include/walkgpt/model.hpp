#pragma once

// Desk-scale grounded vision-language model: frozen patch encoder, MSQP,
// tiny decoder-only language model, CTP, prompt-conditioned mask decoder,
// and the region alignment head, plus the optimizer and training loop.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "walkgpt/ctp.hpp"
#include "walkgpt/curation.hpp"
#include "walkgpt/io.hpp"
#include "walkgpt/msqp.hpp"
#include "walkgpt/objectives.hpp"
#include "walkgpt/region_alignment.hpp"
#include "walkgpt/tensor.hpp"
#include "walkgpt/vocabulary.hpp"

namespace walkgpt::model {

using ad::Matrix;
using ad::Var;

enum class ProjectorKind { kMsqp, kMlp };

struct ModelConfig {
  // Architecture.
  int vocab_size = 512;
  int hidden = 128;  // H_llm
  int n_layers = 2;
  int n_heads = 4;
  int mlp_ratio = 4;
  int channels = 64;  // C
  int d_proj = 128;
  int d_vis = 32;
  int k_bank = 4;
  int image_size = 64;
  int grid = 16;
  int msqp_heads = 8;
  int msqp_layers = 2;
  int max_seq_len = 512;
  bool mask_pad_tokens = false;  // hide MSQP pad rows from the language model

  // Objectives.
  objectives::LossWeights weights;
  objectives::CeReduction ce_reduction = objectives::CeReduction::kPooledTokens;
  double tau = 0.07;
  int k_pos = 32;
  int k_neg = 8;
  bool use_logit_scale = false;

  // Optimization.
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  int batch_size = 4;
  int grad_accum = 1;
  int epochs = 1;
  uint64_t seed = 0;

  // Structural ablations.
  ProjectorKind projector = ProjectorKind::kMsqp;
  bool drop_distance_block = false;
  bool freeze_lm = false;

  static ModelConfig Desk() { return {}; }
  // Full-size reference values; not meant to run on a desk machine.
  static ModelConfig Reference();

  void Validate() const;  // throws InvariantViolation / BadGridShape
  std::string ToJson() const;
  static ModelConfig FromJson(const std::string& text);
  // Overlays the keys present in `text` onto `base`.
  static ModelConfig Merge(const ModelConfig& base, const std::string& text);
};

// Frozen patch encoder: each grid cell's pixels plus its normalized
// coordinates pass through a fixed random affine map and tanh.
class PixelEncoder {
 public:
  PixelEncoder() = default;
  PixelEncoder(int image_size, int grid, int channels, uint64_t seed);

  // Returns the grid_h*grid_w x C feature matrix. Throws BadImageShape.
  Matrix Encode(const io::Image& image) const;
  msqp::FeatureGrid EncodeBatch(const std::vector<const io::Image*>& images) const;

  int grid() const { return grid_; }
  int image_size() const { return image_size_; }
  Matrix& weight() { return weight_; }
  Matrix& bias() { return bias_; }
  const Matrix& weight() const { return weight_; }
  const Matrix& bias() const { return bias_; }
  double Checksum() const;

 private:
  int image_size_ = 0;
  int grid_ = 0;
  Matrix weight_;  // (patch*patch*3 + 2) x C
  Matrix bias_;    // 1 x C
};

struct TransformerBlock {
  ad::LayerNorm ln1;
  ad::Linear qkv;  // H -> 3H
  ad::Linear proj;
  ad::LayerNorm ln2;
  ad::Linear fc1;
  ad::Linear fc2;
};

struct LanguageModel {
  Var tok_emb;  // V x H
  Var pos_emb;  // max_seq_len x H
  std::vector<TransformerBlock> blocks;
  ad::LayerNorm ln_f;
  Var head;  // H x V
  int n_heads = 4;

  static LanguageModel Create(const ModelConfig& cfg, ad::ParameterStore& store, ad::Rng& rng);
};

struct LmOutput {
  Var logits;  // S x V (text positions only)
  Var hidden;  // S x H final normalized states at text positions
};

// Per-token MLP projector used by the "without MSQP" ablation.
struct MlpProjector {
  ad::Linear fc1;
  ad::Linear fc2;
};

struct PixelDecoder {
  Var w_pix;   // C x d_vis
  Var b_pix;   // 1 x d_vis
  Var w_glob;  // H x d_vis
  Var bias;    // 1 x 1
};

struct ImageTokens {
  Var values;                 // n_img x H
  std::vector<bool> pad_mask; // n_img
};

// One training/evaluation example in token form.
struct Example {
  std::string sample_id;
  Matrix features;                   // frozen encoder output, grid*grid x C
  objectives::TokenSequence tokens;  // [BOS] question [SEP] answer [EOS]
  int prompt_length = 0;             // tokens before the first answer token
  std::vector<Matrix> gt_masks;      // one per <SEG>, image resolution
};

struct ForwardResult {
  std::vector<Var> logits;  // per example, S x V
  std::vector<std::vector<Var>> mask_logits;  // per example, per <SEG>, image_size x image_size
  Var ce;
  Var dice;
  Var bce;
  Var nce;
  objectives::SpanCeResult dist_span;
  Var total;
};

class WalkGptModel {
 public:
  WalkGptModel(ModelConfig config, Vocabulary vocab);

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }
  const PixelEncoder& encoder() const { return encoder_; }
  PixelEncoder& encoder() { return encoder_; }
  const msqp::MsqpParams& msqp() const { return msqp_; }
  const ctp::CtpParams& ctp() const { return ctp_; }
  const align::AlignmentParams& alignment() const { return align_; }
  const PixelDecoder& decoder() const { return decoder_; }
  const LanguageModel& lm() const { return lm_; }

  int num_image_tokens() const;
  Matrix EncodeImage(const io::Image& image) const { return encoder_.Encode(image); }
  ImageTokens ProjectImage(const Matrix& z) const;
  // Throws SequenceTooLong.
  LmOutput LmForward(const std::vector<int>& ids, const ImageTokens& image) const;
  // One mask logit grid (image_size x image_size) per prompt-bank token group.
  std::vector<Var> DecodeMasks(const Var& prompt_bank, int num_tokens, const Matrix& z, const ImageTokens& image) const;

  // Builds the teacher-forced sequence and ground-truth masks for a sample.
  Example MakeExample(const curation::VQASample& sample, const io::Image& image) const;
  std::vector<int> PromptIds(const std::string& question) const;

  // Full joint objective over a micro-batch. Call ad::Backward on `total`
  // for gradients.
  ForwardResult Forward(const std::vector<Example>& batch) const;

  // Greedy decoding with a key/value cache. Stops after EOS or max_new tokens.
  std::vector<int> Generate(const std::vector<int>& prompt_ids, const ImageTokens& image, int max_new) const;

  // Indices into params() of the arrays the optimizer updates.
  std::vector<size_t> TrainableIndices() const;

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  ad::ParameterStore params_;
  PixelEncoder encoder_;
  msqp::MsqpParams msqp_;
  MlpProjector mlp_projector_;
  LanguageModel lm_;
  ctp::CtpParams ctp_;
  PixelDecoder decoder_;
  align::AlignmentParams align_;
};

// Answer text with the <distance> block removed (ablation).
std::string StripDistanceBlock(const std::string& answer);

// Builds the vocabulary over every question and answer.
Vocabulary BuildVocabulary(const std::vector<curation::VQASample>& samples, int max_size);

struct AdamW {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  static AdamW FromConfig(const ModelConfig& cfg);
  // Applies one update to params[i] for i in `indices` using their grads.
  void Step(ad::ParameterStore& params, const std::vector<size_t>& indices, double grad_scale = 1.0);
};

struct TrainState {
  AdamW optimizer;
  long step = 0;  // completed optimizer updates
};

// Batch membership for an update step is a pure function of (seed, step).
std::vector<int> BatchIndices(uint64_t seed, long step, int dataset_size, int batch_size);

// One optimizer update with gradient accumulation over grad_accum micro-
// batches. If any loss is non-finite, throws NonFiniteLoss and leaves the
// parameters and state untouched.
objectives::LossBreakdown TrainStep(WalkGptModel& model, TrainState& state, const std::vector<Example>& dataset);

struct TokenAccuracy {
  int correct = 0;
  int total = 0;
  bool distance_exact = true;  // every distance-span target predicted correctly
  double value() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

// Teacher-forced argmax accuracy over answer targets.
TokenAccuracy AnswerTokenAccuracy(const WalkGptModel& model, const std::vector<Example>& batch);
// Mean IoU of thresholded predicted masks against ground truth.
double MeanMaskIou(const WalkGptModel& model, const std::vector<Example>& batch);

double ParameterChecksum(const ad::ParameterStore& params);

}  // namespace walkgpt::model
