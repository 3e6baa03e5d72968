#include "walkgpt/model.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "walkgpt/errors.hpp"
#include "walkgpt/grammar.hpp"
#include "walkgpt/metrics.hpp"

namespace walkgpt::model {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::Reference() {
  ModelConfig c;
  c.vocab_size = 32000;
  c.hidden = 4096;
  c.n_layers = 32;
  c.n_heads = 32;
  c.channels = 1280;
  c.d_proj = 1024;
  c.d_vis = 256;
  c.image_size = 448;
  c.grid = 64;
  c.max_seq_len = 2048;
  c.batch_size = 16;
  c.grad_accum = 10;
  c.epochs = 10;
  c.lr = 2e-4;
  return c;
}

void ModelConfig::Validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw InvariantViolation(std::string(name) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(hidden, "hidden");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(mlp_ratio, "mlp_ratio");
  positive(channels, "channels");
  positive(d_proj, "d_proj");
  positive(d_vis, "d_vis");
  positive(k_bank, "k_bank");
  positive(max_seq_len, "max_seq_len");
  positive(batch_size, "batch_size");
  positive(grad_accum, "grad_accum");
  if (epochs < 0) throw InvariantViolation("epochs must be non-negative");
  if (hidden % n_heads != 0) throw InvariantViolation("n_heads must divide hidden");
  if (d_proj % msqp_heads != 0) throw InvariantViolation("msqp_heads must divide d_proj");
  if (grid < 4 || grid % 4 != 0) throw BadGridShape("grid must be a positive multiple of 4");
  if (image_size < grid || image_size % grid != 0) throw BadImageShape("image_size must be a multiple of grid");
  if (!(tau > 0.0)) throw InvariantViolation("tau must be positive");
  if (!(lr >= 0.0)) throw InvariantViolation("learning rate must be non-negative");
}

namespace {

const char* ToString(ProjectorKind k) { return k == ProjectorKind::kMsqp ? "msqp" : "mlp"; }

const char* ToString(objectives::CeReduction r) {
  return r == objectives::CeReduction::kPooledTokens ? "pooled_tokens" : "per_sequence";
}

void Overlay(ModelConfig& c, const json& j) {
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("vocab_size", c.vocab_size);
  get("hidden", c.hidden);
  get("n_layers", c.n_layers);
  get("n_heads", c.n_heads);
  get("mlp_ratio", c.mlp_ratio);
  get("channels", c.channels);
  get("d_proj", c.d_proj);
  get("d_vis", c.d_vis);
  get("k_bank", c.k_bank);
  get("image_size", c.image_size);
  get("grid", c.grid);
  get("msqp_heads", c.msqp_heads);
  get("msqp_layers", c.msqp_layers);
  get("max_seq_len", c.max_seq_len);
  get("mask_pad_tokens", c.mask_pad_tokens);
  get("alpha_ce", c.weights.ce);
  get("alpha_dice", c.weights.dice);
  get("alpha_bce", c.weights.bce);
  get("alpha_nce", c.weights.nce);
  if (j.contains("alpha_seg")) {
    const double a2 = j.at("alpha_seg").get<double>();
    c.weights.dice = a2 / 2.0;
    c.weights.bce = a2 / 2.0;
  }
  if (j.contains("ce_reduction")) {
    const std::string r = j.at("ce_reduction").get<std::string>();
    if (r == "pooled_tokens") {
      c.ce_reduction = objectives::CeReduction::kPooledTokens;
    } else if (r == "per_sequence") {
      c.ce_reduction = objectives::CeReduction::kPerSequenceMean;
    } else {
      throw InvariantViolation("unknown ce_reduction " + r);
    }
  }
  get("tau", c.tau);
  get("k_pos", c.k_pos);
  get("k_neg", c.k_neg);
  get("use_logit_scale", c.use_logit_scale);
  get("lr", c.lr);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("weight_decay", c.weight_decay);
  get("batch_size", c.batch_size);
  get("grad_accum", c.grad_accum);
  get("epochs", c.epochs);
  get("seed", c.seed);
  if (j.contains("projector")) {
    const std::string p = j.at("projector").get<std::string>();
    if (p == "msqp") {
      c.projector = ProjectorKind::kMsqp;
    } else if (p == "mlp") {
      c.projector = ProjectorKind::kMlp;
    } else {
      throw InvariantViolation("unknown projector " + p);
    }
  }
  get("drop_distance_block", c.drop_distance_block);
  get("freeze_lm", c.freeze_lm);
}

}  // namespace

std::string ModelConfig::ToJson() const {
  nlohmann::ordered_json j;
  j["vocab_size"] = vocab_size;
  j["hidden"] = hidden;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["mlp_ratio"] = mlp_ratio;
  j["channels"] = channels;
  j["d_proj"] = d_proj;
  j["d_vis"] = d_vis;
  j["k_bank"] = k_bank;
  j["image_size"] = image_size;
  j["grid"] = grid;
  j["msqp_heads"] = msqp_heads;
  j["msqp_layers"] = msqp_layers;
  j["max_seq_len"] = max_seq_len;
  j["mask_pad_tokens"] = mask_pad_tokens;
  j["alpha_ce"] = weights.ce;
  j["alpha_dice"] = weights.dice;
  j["alpha_bce"] = weights.bce;
  j["alpha_nce"] = weights.nce;
  j["ce_reduction"] = ToString(ce_reduction);
  j["tau"] = tau;
  j["k_pos"] = k_pos;
  j["k_neg"] = k_neg;
  j["use_logit_scale"] = use_logit_scale;
  j["lr"] = lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["weight_decay"] = weight_decay;
  j["batch_size"] = batch_size;
  j["grad_accum"] = grad_accum;
  j["epochs"] = epochs;
  j["seed"] = seed;
  j["projector"] = ToString(projector);
  j["drop_distance_block"] = drop_distance_block;
  j["freeze_lm"] = freeze_lm;
  return j.dump(2);
}

ModelConfig ModelConfig::FromJson(const std::string& text) { return Merge(ModelConfig{}, text); }

ModelConfig ModelConfig::Merge(const ModelConfig& base, const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw InvariantViolation(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw InvariantViolation("config must be a JSON object");
  ModelConfig c = base;
  try {
    Overlay(c, j);
  } catch (const json::exception& e) {
    throw InvariantViolation(std::string("config field has the wrong type: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Frozen encoder

PixelEncoder::PixelEncoder(int image_size, int grid, int channels, uint64_t seed)
    : image_size_(image_size), grid_(grid) {
  if (grid < 1 || image_size % grid != 0) throw BadImageShape("image size must be a multiple of grid");
  const int patch = image_size / grid;
  const int in = patch * patch * 3 + 2;
  ad::Rng rng(seed ^ 0xE4C0DE5EEDULL);
  weight_ = ad::UniformMatrix(in, channels, 2.0 / std::sqrt(static_cast<double>(in)), rng);
  bias_ = ad::UniformMatrix(1, channels, 0.5, rng);
}

Matrix PixelEncoder::Encode(const io::Image& image) const {
  if (image.rows != image_size_ || image.cols != image_size_ || image.channels != 3) {
    throw BadImageShape("expected " + std::to_string(image_size_) + "x" + std::to_string(image_size_) +
                        " RGB image, got " + std::to_string(image.rows) + "x" + std::to_string(image.cols) + "x" +
                        std::to_string(image.channels));
  }
  const int patch = image_size_ / grid_;
  Matrix x(grid_ * grid_, weight_.rows());
  for (int gr = 0; gr < grid_; ++gr) {
    for (int gc = 0; gc < grid_; ++gc) {
      const int row = gr * grid_ + gc;
      int k = 0;
      for (int y = 0; y < patch; ++y) {
        for (int xx = 0; xx < patch; ++xx) {
          for (int ch = 0; ch < 3; ++ch) x(row, k++) = image.at(gr * patch + y, gc * patch + xx, ch) / 255.0 - 0.5;
        }
      }
      x(row, k++) = (gr + 0.5) / grid_ - 0.5;
      x(row, k++) = (gc + 0.5) / grid_ - 0.5;
    }
  }
  Matrix z = x * weight_;
  z.rowwise() += bias_.row(0);
  return z.array().tanh().matrix();
}

msqp::FeatureGrid PixelEncoder::EncodeBatch(const std::vector<const io::Image*>& images) const {
  msqp::FeatureGrid g;
  g.grid_h = grid_;
  g.grid_w = grid_;
  for (const io::Image* img : images) g.values.push_back(Encode(*img));
  return g;
}

double PixelEncoder::Checksum() const {
  double s = 0.0;
  for (Eigen::Index i = 0; i < weight_.size(); ++i) s += weight_.data()[i] * static_cast<double>(i % 97 + 1);
  for (Eigen::Index i = 0; i < bias_.size(); ++i) s += bias_.data()[i] * static_cast<double>(i % 89 + 1);
  return s;
}

double ParameterChecksum(const ad::ParameterStore& params) {
  double s = 0.0;
  size_t k = 0;
  for (const auto& [name, v] : params.entries()) {
    const Matrix& m = v.value();
    for (Eigen::Index i = 0; i < m.size(); ++i) s += m.data()[i] * static_cast<double>((k + i) % 101 + 1);
    k += static_cast<size_t>(m.size());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Language model

LanguageModel LanguageModel::Create(const ModelConfig& cfg, ad::ParameterStore& store, ad::Rng& rng) {
  LanguageModel lm;
  lm.n_heads = cfg.n_heads;
  const int H = cfg.hidden;
  lm.tok_emb = store.Add("lm.tok_emb", ad::UniformMatrix(cfg.vocab_size, H, 0.1, rng));
  lm.pos_emb = store.Add("lm.pos_emb", ad::UniformMatrix(cfg.max_seq_len, H, 0.02, rng));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "lm.block" + std::to_string(l);
    TransformerBlock b;
    b.ln1 = ad::LayerNorm::Create(store, p + ".ln1", H);
    b.qkv = ad::Linear::Create(store, p + ".qkv", H, 3 * H, rng);
    b.proj = ad::Linear::Create(store, p + ".proj", H, H, rng);
    b.ln2 = ad::LayerNorm::Create(store, p + ".ln2", H);
    b.fc1 = ad::Linear::Create(store, p + ".fc1", H, cfg.mlp_ratio * H, rng);
    b.fc2 = ad::Linear::Create(store, p + ".fc2", cfg.mlp_ratio * H, H, rng);
    lm.blocks.push_back(std::move(b));
  }
  lm.ln_f = ad::LayerNorm::Create(store, "lm.ln_f", H);
  lm.head = store.Add("lm.head", ad::UniformMatrix(H, cfg.vocab_size, 1.0 / std::sqrt(double(H)), rng));
  return lm;
}

namespace {

// Image rows attend to each other freely; text rows are causal and see every
// image row.
bool Allowed(int i, int j, int n_img) { return j <= i || (i < n_img && j < n_img); }

Matrix AttentionMask(int rows_from, int n_rows, int n_cols, int n_img, const std::vector<bool>* hidden_cols) {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  Matrix m(n_rows, n_cols);
  for (int r = 0; r < n_rows; ++r) {
    const int i = rows_from + r;
    for (int j = 0; j < n_cols; ++j) {
      bool ok = Allowed(i, j, n_img);
      if (ok && hidden_cols && j < static_cast<int>(hidden_cols->size()) && (*hidden_cols)[static_cast<size_t>(j)] &&
          i != j) {
        ok = false;
      }
      m(r, j) = ok ? 0.0 : neg_inf;
    }
  }
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model

WalkGptModel::WalkGptModel(ModelConfig config, Vocabulary vocab) : config_(std::move(config)), vocab_(std::move(vocab)) {
  config_.vocab_size = vocab_.size();
  config_.Validate();
  ad::Rng rng(config_.seed * 0x2545F4914F6CDD1DULL + 17);
  encoder_ = PixelEncoder(config_.image_size, config_.grid, config_.channels, config_.seed);

  if (config_.projector == ProjectorKind::kMsqp) {
    msqp::MsqpConfig mc;
    mc.channels = config_.channels;
    mc.d_proj = config_.d_proj;
    mc.hidden = config_.hidden;
    mc.num_heads = config_.msqp_heads;
    mc.num_layers = config_.msqp_layers;
    mc.mask_pad_tokens = config_.mask_pad_tokens;
    msqp_ = msqp::MsqpParams::Create(mc, params_, rng);
  } else {
    mlp_projector_.fc1 = ad::Linear::Create(params_, "msqp.mlp.fc1", config_.channels, config_.d_proj, rng);
    mlp_projector_.fc2 = ad::Linear::Create(params_, "msqp.mlp.fc2", config_.d_proj, config_.hidden, rng);
  }
  lm_ = LanguageModel::Create(config_, params_, rng);

  ctp::CtpConfig cc;
  cc.hidden = config_.hidden;
  cc.d_vis = config_.d_vis;
  cc.k_bank = config_.k_bank;
  cc.use_logit_scale = config_.use_logit_scale;
  ctp_ = ctp::CtpParams::Create(cc, params_, rng);

  const double sc = 1.0 / std::sqrt(double(config_.channels));
  decoder_.w_pix = params_.Add("decoder.w_pix", ad::UniformMatrix(config_.channels, config_.d_vis, sc, rng));
  decoder_.b_pix = params_.Add("decoder.b_pix", Matrix::Zero(1, config_.d_vis));
  decoder_.w_glob = params_.Add("decoder.w_glob",
                                ad::UniformMatrix(config_.hidden, config_.d_vis, 1.0 / std::sqrt(double(config_.hidden)), rng));
  decoder_.bias = params_.Add("decoder.bias", Matrix::Zero(1, 1));

  align::AlignmentConfig ac;
  ac.hidden = config_.hidden;
  ac.channels = config_.channels;
  ac.d_vis = config_.d_vis;
  ac.tau = config_.tau;
  ac.k_pos = config_.k_pos;
  ac.k_neg = config_.k_neg;
  align_ = align::AlignmentParams::Create(ac, params_, rng);

  if (config_.freeze_lm) {
    for (auto& [name, v] : params_.entries()) {
      if (name.rfind("lm.", 0) == 0) v.node()->requires_grad = false;
    }
  }
}

int WalkGptModel::num_image_tokens() const {
  return config_.projector == ProjectorKind::kMsqp ? msqp_.config.output_tokens() : config_.grid * config_.grid;
}

ImageTokens WalkGptModel::ProjectImage(const Matrix& z) const {
  ImageTokens out;
  if (config_.projector == ProjectorKind::kMsqp) {
    out.values = msqp::ForwardSample(msqp_, z, config_.grid, config_.grid);
    out.pad_mask.assign(static_cast<size_t>(msqp_.config.output_tokens()), false);
    for (int i = msqp_.config.total_queries(); i < msqp_.config.output_tokens(); ++i) {
      out.pad_mask[static_cast<size_t>(i)] = true;
    }
  } else {
    out.values = mlp_projector_.fc2(ad::Gelu(mlp_projector_.fc1(Var::Constant(z))));
    out.pad_mask.assign(static_cast<size_t>(z.rows()), false);
  }
  return out;
}

LmOutput WalkGptModel::LmForward(const std::vector<int>& ids, const ImageTokens& image) const {
  const int n_img = static_cast<int>(image.values.rows());
  const int S = static_cast<int>(ids.size());
  const int T = n_img + S;
  if (T > config_.max_seq_len) {
    throw SequenceTooLong("sequence of " + std::to_string(T) + " positions exceeds max_seq_len " +
                          std::to_string(config_.max_seq_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) throw ShapeMismatch("token id out of vocabulary range");
  }
  const int H = config_.hidden;
  const int nh = lm_.n_heads;
  const int hd = H / nh;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  const Var parts[] = {image.values, ad::GatherRows(lm_.tok_emb, ids)};
  Var x = ad::Add(ad::ConcatRows(parts), ad::SliceRows(lm_.pos_emb, 0, T));
  const Matrix mask =
      AttentionMask(0, T, T, n_img, config_.mask_pad_tokens ? &image.pad_mask : nullptr);
  for (const TransformerBlock& b : lm_.blocks) {
    const Var qkv = b.qkv(b.ln1(x));
    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(nh));
    for (int h = 0; h < nh; ++h) {
      const Var q = ad::SliceCols(qkv, h * hd, hd);
      const Var k = ad::SliceCols(qkv, H + h * hd, hd);
      const Var v = ad::SliceCols(qkv, 2 * H + h * hd, hd);
      const Var att = ad::SoftmaxRows(ad::Scale(ad::MatMulNT(q, k), inv_sqrt), &mask);
      heads.push_back(ad::MatMul(att, v));
    }
    x = ad::Add(x, b.proj(ad::ConcatCols(heads)));
    x = ad::Add(x, b.fc2(ad::Gelu(b.fc1(b.ln2(x)))));
  }
  LmOutput out;
  out.hidden = lm_.ln_f(ad::SliceRows(x, n_img, S));
  out.logits = ad::MatMul(out.hidden, lm_.head);
  return out;
}

std::vector<Var> WalkGptModel::DecodeMasks(const Var& prompt_bank, int num_tokens, const Matrix& z,
                                           const ImageTokens& image) const {
  if (num_tokens < 1) throw EmptyPromptBank("mask decoding needs at least one prompt token group");
  const int K = config_.k_bank;
  if (prompt_bank.rows() != static_cast<ad::Index>(num_tokens) * K) {
    throw ShapeMismatch("prompt bank rows != tokens * K_bank");
  }
  std::vector<int> keep;
  for (size_t i = 0; i < image.pad_mask.size(); ++i) {
    if (!image.pad_mask[i]) keep.push_back(static_cast<int>(i));
  }
  const Var summary = ad::ColMean(ad::GatherRows(image.values, keep));
  const Var glob = ad::MatMul(summary, decoder_.w_glob);
  const Var f = ad::AddRowBroadcast(ad::AddRowBroadcast(ad::MatMul(Var::Constant(z), decoder_.w_pix), decoder_.b_pix),
                                    glob);
  // Mean over the K_bank sub-embeddings of each token.
  std::vector<Var> means;
  for (int m = 0; m < num_tokens; ++m) means.push_back(ad::ColMean(ad::SliceRows(prompt_bank, m * K, K)));
  const Var logits = ad::MatMulNT(f, ad::ConcatRows(means));  // L x M
  const int factor = config_.image_size / config_.grid;
  std::vector<Var> out;
  for (int m = 0; m < num_tokens; ++m) {
    const Var grid_logits = ad::AddRowBroadcast(ad::SliceCols(logits, m, 1), decoder_.bias);
    const Var up = ad::UpsampleGridNearest(grid_logits, config_.grid, config_.grid, factor);
    out.push_back(ad::Reshape(up, config_.image_size, config_.image_size));
  }
  return out;
}

std::vector<int> WalkGptModel::PromptIds(const std::string& question) const {
  std::vector<int> ids = {Vocabulary::kBos};
  const std::vector<int> q = vocab_.Encode(question);
  ids.insert(ids.end(), q.begin(), q.end());
  ids.push_back(Vocabulary::kSep);
  return ids;
}

std::string StripDistanceBlock(const std::string& answer) {
  const size_t open = answer.find(grammar::kDistanceOpen);
  if (open == std::string::npos) return answer;
  const size_t close = answer.find(grammar::kDistanceClose, open);
  if (close == std::string::npos) return answer;
  std::string out = answer.substr(0, open);
  out += answer.substr(close + grammar::kDistanceClose.size());
  while (!out.empty() && (out.back() == '\n' || out.back() == ' ')) out.pop_back();
  return out;
}

Vocabulary BuildVocabulary(const std::vector<curation::VQASample>& samples, int max_size) {
  std::vector<std::string> corpus;
  for (const curation::VQASample& s : samples) {
    corpus.push_back(s.question);
    corpus.push_back(s.answer);
  }
  return Vocabulary::Build(corpus, max_size);
}

Example WalkGptModel::MakeExample(const curation::VQASample& sample, const io::Image& image) const {
  Example ex;
  ex.sample_id = sample.sample_id;
  ex.features = encoder_.Encode(image);
  std::vector<int> ids = PromptIds(sample.question);
  ex.prompt_length = static_cast<int>(ids.size());
  const std::string answer = config_.drop_distance_block ? StripDistanceBlock(sample.answer) : sample.answer;
  const std::vector<int> a = vocab_.Encode(answer);
  ids.insert(ids.end(), a.begin(), a.end());
  ids.push_back(Vocabulary::kEos);
  ex.tokens.input_ids = ids;
  ex.tokens.answer_mask.assign(ids.size(), false);
  for (size_t t = static_cast<size_t>(ex.prompt_length); t < ids.size(); ++t) ex.tokens.answer_mask[t] = true;
  ex.tokens.span_labels = objectives::LabelSpans(ex.tokens.input_ids, ex.tokens.answer_mask);
  for (const curation::BinaryMask& m : sample.masks) {
    if (!m.SameShape(config_.image_size, config_.image_size)) {
      throw BadMaskShape("mask for " + sample.sample_id + " is not at image resolution");
    }
    Matrix g(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
      for (int c = 0; c < m.cols; ++c) g(r, c) = m.at(r, c) ? 1.0 : 0.0;
    }
    ex.gt_masks.push_back(std::move(g));
  }
  const size_t n_seg = grammar::ExtractSegPositions(ex.tokens.input_ids, Vocabulary::kSeg).size();
  if (n_seg != ex.gt_masks.size()) {
    throw InvariantViolation(sample.sample_id + ": " + std::to_string(n_seg) + " <SEG> tokens but " +
                             std::to_string(ex.gt_masks.size()) + " masks");
  }
  return ex;
}

ForwardResult WalkGptModel::Forward(const std::vector<Example>& batch) const {
  if (batch.empty()) throw DegenerateBatch("empty batch");
  ForwardResult r;
  objectives::TokenBatch tokens;
  std::vector<objectives::MaskPair> pairs;
  ctp::SegTokenStates seg;
  ctp::CalibratedPromptBank bank;
  bank.k_bank = config_.k_bank;
  std::vector<Matrix> grids;
  for (const Example& ex : batch) {
    const ImageTokens image = ProjectImage(ex.features);
    LmOutput lm = LmForward(ex.tokens.input_ids, image);
    r.logits.push_back(lm.logits);
    tokens.push_back(ex.tokens);

    const std::vector<int> pos = grammar::ExtractSegPositions(ex.tokens.input_ids, Vocabulary::kSeg);
    std::vector<Var> masks;
    if (!pos.empty()) {
      const Var t = ad::GatherRows(lm.hidden, pos);
      const Var e = ctp::CtpForwardSample(ctp_, t);
      masks = DecodeMasks(e, static_cast<int>(pos.size()), ex.features, image);
      if (masks.size() != ex.gt_masks.size()) throw ShapeMismatch("predicted and ground-truth mask counts differ");
      for (size_t m = 0; m < masks.size(); ++m) pairs.push_back({masks[m], ex.gt_masks[m]});
      // The alignment term trains CTP and the alignment head only; the
      // language model sees it through neither its queries nor its anchors.
      const Var t_fixed = Var::Constant(t.value());
      seg.values.push_back(t_fixed);
      seg.valid.emplace_back(pos.size(), true);
      bank.values.push_back(config_.weights.nce != 0.0 ? ctp::CtpForwardSample(ctp_, t_fixed) : e);
      bank.valid.emplace_back(pos.size() * static_cast<size_t>(config_.k_bank), true);
      grids.push_back(ex.features);
    }
    r.mask_logits.push_back(std::move(masks));
  }
  r.ce = objectives::MaskedCe(r.logits, tokens, config_.ce_reduction);
  r.dist_span = objectives::SpanCe(r.logits, tokens, objectives::SpanLabel::kDistance);
  if (!pairs.empty()) {
    r.dice = objectives::DiceLoss(pairs);
    r.bce = objectives::BceSeg(pairs);
  }
  if (config_.weights.nce != 0.0 && !seg.values.empty()) {
    r.nce = align::RegionAlignmentLoss(seg, grids, bank, align_, &ctp_).loss;
  }
  r.total = objectives::TotalLoss(r.ce, r.dice, r.bce, r.nce, config_.weights);
  return r;
}

// ---------------------------------------------------------------------------
// Greedy generation with a key/value cache (plain matrices, no graph).

namespace {

Matrix LayerNormPlain(const Matrix& x, const ad::LayerNorm& ln) {
  Matrix y(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).sum() / n;
    const double var = (x.row(r).array() - mean).square().sum() / n;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    y.row(r) = ((x.row(r).array() - mean) * inv).matrix().cwiseProduct(ln.gamma.value().row(0)) + ln.beta.value().row(0);
  }
  return y;
}

Matrix LinearPlain(const Matrix& x, const ad::Linear& l) {
  Matrix y = x * l.weight.value();
  if (l.bias.defined()) y.rowwise() += l.bias.value().row(0);
  return y;
}

Matrix GeluPlain(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
}

struct KvCache {
  std::vector<Matrix> k;  // per layer, positions x H
  std::vector<Matrix> v;
};

// Runs rows x (starting at absolute position `start`) through every block,
// appending their keys and values to the cache; returns final normalized
// hidden rows.
Matrix RunCached(const LanguageModel& lm, const Matrix& x_in, int start, int n_img, KvCache& cache,
                 const std::vector<bool>* hidden_cols) {
  Matrix x = x_in;
  const int H = static_cast<int>(x.cols());
  const int nh = lm.n_heads;
  const int hd = H / nh;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const int n = static_cast<int>(x.rows());
  for (size_t l = 0; l < lm.blocks.size(); ++l) {
    const TransformerBlock& b = lm.blocks[l];
    const Matrix qkv = LinearPlain(LayerNormPlain(x, b.ln1), b.qkv);
    Matrix& K = cache.k[l];
    Matrix& V = cache.v[l];
    const Eigen::Index old = K.rows();
    K.conservativeResize(old + n, H);
    V.conservativeResize(old + n, H);
    K.bottomRows(n) = qkv.middleCols(H, H);
    V.bottomRows(n) = qkv.middleCols(2 * H, H);
    const int total = static_cast<int>(K.rows());
    const Matrix mask = AttentionMask(start, n, total, n_img, hidden_cols);
    Matrix heads(n, H);
    for (int h = 0; h < nh; ++h) {
      Matrix s = qkv.middleCols(h * hd, hd) * K.middleCols(h * hd, hd).transpose() * inv_sqrt + mask;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp().matrix();
        s.row(r) /= s.row(r).sum();
      }
      heads.middleCols(h * hd, hd) = s * V.middleCols(h * hd, hd);
    }
    x += LinearPlain(heads, b.proj);
    x += LinearPlain(GeluPlain(LinearPlain(LayerNormPlain(x, b.ln2), b.fc1)), b.fc2);
  }
  return LayerNormPlain(x, lm.ln_f);
}

int ArgmaxRow(const Matrix& m, Eigen::Index row) {
  Eigen::Index best = 0;
  m.row(row).maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace

std::vector<int> WalkGptModel::Generate(const std::vector<int>& prompt_ids, const ImageTokens& image,
                                        int max_new) const {
  if (max_new < 1) throw InvariantViolation("max_new must be at least 1");
  if (prompt_ids.empty()) throw InvariantViolation("generation needs a non-empty prompt");
  const int n_img = static_cast<int>(image.values.rows());
  const int H = config_.hidden;
  const Matrix& emb = lm_.tok_emb.value();
  const Matrix& pos = lm_.pos_emb.value();
  const std::vector<bool>* hidden_cols = config_.mask_pad_tokens ? &image.pad_mask : nullptr;

  const int prefix = n_img + static_cast<int>(prompt_ids.size());
  if (prefix > config_.max_seq_len) throw SequenceTooLong("prompt exceeds max_seq_len");
  Matrix x(prefix, H);
  x.topRows(n_img) = image.values.value();
  for (size_t i = 0; i < prompt_ids.size(); ++i) x.row(n_img + static_cast<Eigen::Index>(i)) = emb.row(prompt_ids[i]);
  x += pos.topRows(prefix);

  KvCache cache;
  cache.k.assign(lm_.blocks.size(), Matrix(0, H));
  cache.v.assign(lm_.blocks.size(), Matrix(0, H));
  Matrix hidden = RunCached(lm_, x, 0, n_img, cache, hidden_cols);
  std::vector<int> out;
  int next = ArgmaxRow(hidden.bottomRows(1) * lm_.head.value(), 0);
  for (;;) {
    out.push_back(next);
    if (next == Vocabulary::kEos || static_cast<int>(out.size()) >= max_new) break;
    const int p = prefix + static_cast<int>(out.size()) - 1;
    if (p >= config_.max_seq_len) break;
    Matrix step = emb.row(next) + pos.row(p);
    hidden = RunCached(lm_, step, p, n_img, cache, hidden_cols);
    next = ArgmaxRow(hidden * lm_.head.value(), 0);
  }
  return out;
}

std::vector<size_t> WalkGptModel::TrainableIndices() const {
  std::vector<size_t> idx;
  const auto& entries = params_.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    const std::string& name = entries[i].first;
    if (config_.freeze_lm && name.rfind("lm.", 0) == 0) continue;
    idx.push_back(i);
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Optimization

AdamW AdamW::FromConfig(const ModelConfig& cfg) {
  AdamW a;
  a.lr = cfg.lr;
  a.beta1 = cfg.beta1;
  a.beta2 = cfg.beta2;
  a.eps = cfg.adam_eps;
  a.weight_decay = cfg.weight_decay;
  return a;
}

void AdamW::Step(ad::ParameterStore& params, const std::vector<size_t>& indices, double grad_scale) {
  auto& entries = params.entries();
  if (m.size() != entries.size()) {
    m.assign(entries.size(), Matrix());
    v.assign(entries.size(), Matrix());
  }
  ++step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (size_t i : indices) {
    Var& p = entries[i].second;
    if (m[i].size() == 0) {
      m[i] = Matrix::Zero(p.rows(), p.cols());
      v[i] = Matrix::Zero(p.rows(), p.cols());
    }
    if (lr == 0.0) continue;
    const Matrix g = p.grad() * grad_scale;
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g.cwiseProduct(g);
    Matrix& w = p.mutable_value();
    if (weight_decay != 0.0) w *= (1.0 - lr * weight_decay);
    w.array() -= lr * (m[i].array() / bc1) / ((v[i].array() / bc2).sqrt() + eps);
  }
}

std::vector<int> BatchIndices(uint64_t seed, long step, int dataset_size, int batch_size) {
  if (dataset_size < 1 || batch_size < 1) throw DegenerateBatch("empty dataset or batch");
  std::vector<int> out;
  long cached_epoch = -1;
  std::vector<int> perm(static_cast<size_t>(dataset_size));
  for (int i = 0; i < batch_size; ++i) {
    const long p = step * batch_size + i;
    const long epoch = p / dataset_size;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      ad::Rng rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(epoch) + 1);
      for (int k = dataset_size - 1; k > 0; --k) std::swap(perm[static_cast<size_t>(k)], perm[static_cast<size_t>(rng.UniformInt(0, k))]);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<size_t>(p % dataset_size)]);
  }
  return out;
}

objectives::LossBreakdown TrainStep(WalkGptModel& model, TrainState& state, const std::vector<Example>& dataset) {
  const ModelConfig& cfg = model.config();
  const int accum = cfg.grad_accum;
  objectives::LossBreakdown sum;
  model.params().ZeroGrad();
  try {
    for (int a = 0; a < accum; ++a) {
      const std::vector<int> idx =
          BatchIndices(cfg.seed, state.step * accum + a, static_cast<int>(dataset.size()), cfg.batch_size);
      std::vector<Example> micro;
      for (int i : idx) micro.push_back(dataset[static_cast<size_t>(i)]);
      const ForwardResult r = model.Forward(micro);
      if (!std::isfinite(r.total.item())) throw NonFiniteLoss("total loss is not finite");
      ad::Backward(r.total);
      auto val = [](const Var& v) { return v.defined() ? v.item() : 0.0; };
      sum.ce += val(r.ce);
      sum.dice += val(r.dice);
      sum.bce += val(r.bce);
      sum.nce += val(r.nce);
      sum.dist_span_ce += val(r.dist_span.loss);
      sum.total += val(r.total);
    }
    for (size_t i : model.TrainableIndices()) {
      const Var& p = model.params().entries()[i].second;
      if (p.has_grad() && !p.grad().allFinite()) throw NonFiniteLoss("gradient of " + model.params().entries()[i].first + " is not finite");
    }
  } catch (const NonFiniteLoss&) {
    model.params().ZeroGrad();
    throw;
  }
  // Hyperparameters always follow the config; moments and step persist.
  const AdamW hyper = AdamW::FromConfig(cfg);
  state.optimizer.lr = hyper.lr;
  state.optimizer.beta1 = hyper.beta1;
  state.optimizer.beta2 = hyper.beta2;
  state.optimizer.eps = hyper.eps;
  state.optimizer.weight_decay = hyper.weight_decay;
  state.optimizer.Step(model.params(), model.TrainableIndices(), 1.0 / accum);
  model.params().ZeroGrad();
  ++state.step;
  const double inv = 1.0 / accum;
  return objectives::TotalLoss(sum.ce * inv, sum.dice * inv, sum.bce * inv, sum.nce * inv, cfg.weights,
                               sum.dist_span_ce * inv);
}

TokenAccuracy AnswerTokenAccuracy(const WalkGptModel& model, const std::vector<Example>& batch) {
  ad::NoGradGuard guard;
  TokenAccuracy acc;
  for (const Example& ex : batch) {
    const LmOutput out = model.LmForward(ex.tokens.input_ids, model.ProjectImage(ex.features));
    const Matrix& logits = out.logits.value();
    const std::vector<int>& ids = ex.tokens.input_ids;
    bool in_distance = false;
    for (size_t t = 1; t < ids.size(); ++t) {
      if (ids[t] == Vocabulary::kDistanceOpen) in_distance = true;
      const bool counted = ex.tokens.answer_mask[t];
      const bool hit = ArgmaxRow(logits, static_cast<Eigen::Index>(t - 1)) == ids[t];
      if (counted) {
        ++acc.total;
        acc.correct += hit ? 1 : 0;
        if (in_distance && !hit) acc.distance_exact = false;
      }
      if (ids[t] == Vocabulary::kDistanceClose) in_distance = false;
    }
  }
  return acc;
}

double MeanMaskIou(const WalkGptModel& model, const std::vector<Example>& batch) {
  ad::NoGradGuard guard;
  const ForwardResult r = model.Forward(batch);
  double sum = 0.0;
  int n = 0;
  for (size_t b = 0; b < batch.size(); ++b) {
    for (size_t m = 0; m < r.mask_logits[b].size(); ++m) {
      const Matrix& logits = r.mask_logits[b][m].value();
      const Matrix& gt = batch[b].gt_masks[m];
      curation::BinaryMask pred(static_cast<int>(logits.rows()), static_cast<int>(logits.cols()));
      curation::BinaryMask ref(static_cast<int>(gt.rows()), static_cast<int>(gt.cols()));
      for (Eigen::Index i = 0; i < logits.size(); ++i) {
        pred.data[static_cast<size_t>(i)] = logits.data()[i] > 0.0 ? 1 : 0;
        ref.data[static_cast<size_t>(i)] = gt.data()[i] > 0.5 ? 1 : 0;
      }
      sum += metrics::MaskIou(pred, ref);
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

}  // namespace walkgpt::model
