#include "walkgpt/commands.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "walkgpt/checkpoint.hpp"
#include "walkgpt/curation.hpp"
#include "walkgpt/errors.hpp"
#include "walkgpt/gradcheck.hpp"
#include "walkgpt/grammar.hpp"
#include "walkgpt/io.hpp"
#include "walkgpt/metrics.hpp"
#include "walkgpt/model.hpp"
#include "walkgpt/synthetic.hpp"

namespace walkgpt::commands {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Settings {
  model::ModelConfig model;
  std::string dataset;
  std::string lexicon;
};

Settings LoadSettings(const RunConfig& cfg) {
  Settings s;
  s.model = model::ModelConfig::Desk();
  if (cfg.config_path) {
    const std::string text = io::ReadFile(*cfg.config_path);
    s.model = model::ModelConfig::Merge(s.model, text);
    const auto j = nlohmann::json::parse(text);
    if (j.contains("dataset")) s.dataset = j.at("dataset").get<std::string>();
    if (j.contains("lexicon")) s.lexicon = j.at("lexicon").get<std::string>();
  }
  if (cfg.seed) s.model.seed = *cfg.seed;
  if (!cfg.input.empty()) s.dataset = cfg.input;
  if (!cfg.lexicon.empty()) s.lexicon = cfg.lexicon;
  return s;
}

std::unique_ptr<curation::QuestionSource> MakeQuestionSource() {
  const char* endpoint = std::getenv("WALK_QGEN_ENDPOINT");
  if (endpoint && *endpoint) {
    return std::make_unique<curation::FallbackQuestionSource>(std::make_unique<curation::HttpQuestionSource>(endpoint));
  }
  return std::make_unique<curation::TemplateQuestionSource>();
}

std::string SplitFor(const std::string& sample_id, uint64_t seed, double val_fraction) {
  const uint64_t h = curation::StableHash(sample_id + ":" + std::to_string(seed));
  return static_cast<double>(h % 10000) < val_fraction * 10000.0 ? "val" : "train";
}

struct LoadedSplit {
  std::vector<curation::VQASample> all;
  std::vector<size_t> selected;  // indices into all
  std::vector<io::Image> images; // parallel to selected
};

LoadedSplit LoadSplit(const std::string& dataset, const std::string& split, std::optional<int> limit) {
  LoadedSplit out;
  io::DatasetPaths paths{dataset};
  out.all = io::LoadDataset(paths, curation::AccessibilityOntology::Default());
  for (size_t i = 0; i < out.all.size(); ++i) {
    if (!split.empty() && out.all[i].split != split) continue;
    if (limit && static_cast<int>(out.selected.size()) >= *limit) break;
    out.selected.push_back(i);
    out.images.push_back(io::ReadPnm(paths.root / out.all[i].image_ref));
  }
  return out;
}

io::Image Overlay(const io::Image& rgb, const curation::BinaryMask& mask) {
  io::Image out = rgb;
  for (int r = 0; r < out.rows && r < mask.rows; ++r) {
    for (int c = 0; c < out.cols && c < mask.cols; ++c) {
      if (!mask.at(r, c)) continue;
      out.at(r, c, 0) = static_cast<uint8_t>((out.at(r, c, 0) + 255) / 2);
      out.at(r, c, 1) = static_cast<uint8_t>(out.at(r, c, 1) / 2);
      out.at(r, c, 2) = static_cast<uint8_t>(out.at(r, c, 2) / 2);
    }
  }
  return out;
}

}  // namespace

int Synth(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.out.empty()) {
    err << "synth: --out is required\n";
    return kExitUsage;
  }
  synthetic::WriteSession(cfg.out, cfg.frames, cfg.seed.value_or(0));
  out << "wrote " << cfg.frames << " frames to " << cfg.out << "\n";
  return kExitOk;
}

int Curate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.input.empty() || cfg.out.empty()) {
    err << "curate: --input and --out are required\n";
    return kExitUsage;
  }
  const fs::path in = cfg.input;
  std::vector<std::string> ids;
  if (fs::exists(in / "manifest.txt")) ids = io::ReadManifest(in / "manifest.txt");
  if (ids.empty()) {
    err << "no frames\n";
    return kExitUsage;
  }
  ids = curation::SampleSessionFrames(ids, std::max(1, cfg.frames));
  if (cfg.limit && static_cast<int>(ids.size()) > *cfg.limit) ids.resize(static_cast<size_t>(std::max(0, *cfg.limit)));

  const uint64_t seed = cfg.seed.value_or(0);
  const curation::AccessibilityOntology ontology = curation::AccessibilityOntology::Default();
  std::unique_ptr<curation::QuestionSource> questions = MakeQuestionSource();
  io::DatasetPaths paths{cfg.out};
  fs::create_directories(paths.root);

  std::vector<curation::VQASample> samples;
  std::string jsonl;
  int skipped = 0;
  std::map<std::string, int> class_histogram;
  for (const std::string& id : ids) {
    const io::Image mask_img = io::ReadPnm(in / "masks" / (id + ".ppm"));
    const DepthGrid depth = io::ReadNpy(in / "depth" / (id + ".npy"));
    curation::BuildOptions opts;
    opts.sample_id = id;
    opts.image_ref = "images/" + id + ".ppm";
    curation::VQASample s;
    try {
      s = curation::BuildSample(io::ToChannelGrid(mask_img), depth, opts, ontology, *questions);
    } catch (const NoFeatures& e) {
      err << "skipping " << id << ": " << e.what() << "\n";
      ++skipped;
      continue;
    }
    s.split = SplitFor(id, seed, cfg.val_fraction);
    fs::path image_src = in / "images" / (id + ".ppm");
    if (fs::exists(image_src)) io::WriteFile(paths.root / s.image_ref, io::ReadFile(image_src));
    jsonl += io::WriteSampleFiles(paths, s) + "\n";
    for (const curation::ObjectRecord& o : s.objects) ++class_histogram[o.name];
    samples.push_back(std::move(s));
  }
  io::WriteFile(paths.jsonl(), jsonl);

  const curation::DatasetReport report = curation::VerifyDataset(samples);
  ordered_json summary;
  summary["frames"] = ids.size();
  summary["samples"] = samples.size();
  summary["skipped_no_features"] = skipped;
  summary["passed"] = report.passed;
  summary["pass_rate"] = report.pass_rate();
  summary["class_histogram"] = class_histogram;
  summary["violations"] = report.histogram;
  if (auto* fb = dynamic_cast<curation::FallbackQuestionSource*>(questions.get())) {
    summary["question_fallbacks"] = fb->fallback_count();
  }
  io::WriteFile(paths.root / "curation_summary.json", summary.dump(2) + "\n");
  out << summary.dump(2) << "\n";
  return report.passed == samples.size() ? kExitOk : kExitVerificationFailed;
}

int VerifyDataset(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const Settings s = LoadSettings(cfg);
  if (s.dataset.empty()) {
    err << "verify-dataset: --input DATASET is required\n";
    return kExitUsage;
  }
  std::vector<curation::VQASample> samples =
      io::LoadDataset(io::DatasetPaths{s.dataset}, curation::AccessibilityOntology::Default());
  if (cfg.limit && static_cast<int>(samples.size()) > *cfg.limit) samples.resize(static_cast<size_t>(*cfg.limit));
  const curation::DatasetReport report = curation::VerifyDataset(samples);
  ordered_json j;
  j["samples"] = report.samples.size();
  j["passed"] = report.passed;
  j["pass_rate"] = report.pass_rate();
  j["violations"] = report.histogram;
  ordered_json failures = ordered_json::array();
  for (const grammar::ValidationReport& r : report.samples) {
    for (const grammar::Violation& v : r.violations) {
      failures.push_back({{"sample_id", r.sample_id}, {"code", grammar::ToString(v.code)}, {"message", v.message}});
    }
  }
  j["failures"] = failures;
  if (!cfg.out.empty()) io::WriteFile(fs::path(cfg.out) / "verification_report.json", j.dump(2) + "\n");
  out << j.dump(2) << "\n";
  return report.passed == report.samples.size() ? kExitOk : kExitVerificationFailed;
}

int SampleFrames(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.input.empty()) {
    err << "sample-frames: --input is required\n";
    return kExitUsage;
  }
  fs::path manifest = cfg.input;
  if (fs::is_directory(manifest)) manifest /= "manifest.txt";
  if (!fs::exists(manifest)) {
    err << "no frames\n";
    return kExitUsage;
  }
  const std::vector<std::string> ids = io::ReadManifest(manifest);
  if (ids.empty()) {
    err << "no frames\n";
    return kExitUsage;
  }
  for (const std::string& id : curation::SampleSessionFrames(ids, std::max(1, cfg.frames))) out << id << "\n";
  return kExitOk;
}

int Train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const Settings s = LoadSettings(cfg);
  if (s.dataset.empty() || cfg.out.empty()) {
    err << "train: --input DATASET and --out DIR are required\n";
    return kExitUsage;
  }
  LoadedSplit data = LoadSplit(s.dataset, cfg.split, cfg.limit);
  if (data.selected.empty()) {
    err << "train: no samples in split " << cfg.split << "\n";
    return kExitUsage;
  }

  std::unique_ptr<model::WalkGptModel> m;
  model::TrainState state;
  const bool resume = !cfg.checkpoint.empty();
  if (resume) {
    checkpoint::Loaded loaded = checkpoint::Load(cfg.checkpoint);
    m = std::move(loaded.model);
    state = std::move(loaded.state);
  } else {
    m = std::make_unique<model::WalkGptModel>(s.model, model::BuildVocabulary(data.all, s.model.vocab_size));
    state.optimizer = model::AdamW::FromConfig(m->config());
  }

  std::vector<model::Example> examples;
  for (size_t k = 0; k < data.selected.size(); ++k) {
    examples.push_back(m->MakeExample(data.all[data.selected[k]], data.images[k]));
  }
  const model::ModelConfig& mc = m->config();
  const long per_epoch =
      (static_cast<long>(examples.size()) + mc.batch_size * mc.grad_accum - 1) / (mc.batch_size * mc.grad_accum);
  const long total_steps = cfg.steps ? *cfg.steps : per_epoch * mc.epochs;

  const fs::path out_dir = cfg.out;
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open training log in " + out_dir.string());
  while (state.step < total_steps) {
    objectives::LossBreakdown loss;
    try {
      loss = model::TrainStep(*m, state, examples);
    } catch (const NonFiniteLoss& e) {
      ordered_json dump;
      dump["step"] = state.step;
      dump["error"] = e.what();
      dump["config"] = ordered_json::parse(mc.ToJson());
      io::WriteFile(out_dir / "nonfinite_dump.json", dump.dump(2) + "\n");
      checkpoint::Save(out_dir / "checkpoint_before_nonfinite.wgpt", *m, state);
      err << "train: non-finite loss at step " << state.step << ": " << e.what() << "\n";
      return kExitVerificationFailed;
    }
    log << loss.ToJsonLine(state.step) << "\n";
  }
  log.close();
  checkpoint::Save(out_dir / "checkpoint.wgpt", *m, state);
  out << "trained to step " << state.step << "; checkpoint " << (out_dir / "checkpoint.wgpt").string() << "\n";
  return kExitOk;
}

int Eval(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const Settings s = LoadSettings(cfg);
  if (s.dataset.empty()) {
    err << "eval: --input DATASET is required\n";
    return kExitUsage;
  }
  if (cfg.checkpoint.empty() && !cfg.gt_as_predictions) {
    err << "eval: --checkpoint is required\n";
    return kExitUsage;
  }
  LoadedSplit data = LoadSplit(s.dataset, cfg.split, cfg.limit);
  std::unique_ptr<model::WalkGptModel> m;
  if (!cfg.gt_as_predictions) m = std::move(checkpoint::Load(cfg.checkpoint).model);
  const curation::AccessibilityOntology ontology = curation::AccessibilityOntology::Default();
  const metrics::Lexicon lexicon =
      s.lexicon.empty() ? metrics::Lexicon::Default(ontology) : metrics::Lexicon::FromText(io::ReadFile(s.lexicon));

  metrics::MetricsReport report;
  std::vector<metrics::DepthPair> depth_pairs;
  std::vector<metrics::ImageMasks> images;
  std::vector<grammar::StructuredResponse> responses;
  std::vector<SceneAnnotation> annotations;
  std::ostringstream csv;
  csv << "sample_id,parsed,phrases,depth_pairs,skipped_distances\n";
  const fs::path out_dir = cfg.out.empty() ? fs::path() : fs::path(cfg.out);

  for (size_t k = 0; k < data.selected.size(); ++k) {
    const curation::VQASample& sample = data.all[data.selected[k]];
    metrics::ImageMasks im;
    for (size_t g = 0; g < sample.objects.size() && g < sample.masks.size(); ++g) {
      im.ground_truth.push_back({sample.objects[g].class_id, sample.masks[g]});
    }
    ++report.n_samples;

    std::string text;
    std::vector<int> generated_ids;
    std::vector<int> prompt;
    model::ImageTokens image_tokens;
    model::Matrix features;
    if (cfg.gt_as_predictions) {
      text = sample.answer;
    } else {
      ad::NoGradGuard guard;
      features = m->EncodeImage(data.images[k]);
      image_tokens = m->ProjectImage(features);
      prompt = m->PromptIds(sample.question);
      const int budget = m->config().max_seq_len - m->num_image_tokens() - static_cast<int>(prompt.size());
      generated_ids = m->Generate(prompt, image_tokens, std::max(1, budget));
      text = m->vocab().Decode(generated_ids);
    }

    grammar::StructuredResponse response;
    bool parsed = true;
    try {
      response = grammar::ParseResponse(text);
    } catch (const MalformedResponse&) {
      parsed = false;
      ++report.parse_failures;
    }

    metrics::DistancePairs dp;
    if (parsed) {
      dp = metrics::ParseDistancesForEval(response, sample.annotation, &lexicon);
      depth_pairs.insert(depth_pairs.end(), dp.pairs.begin(), dp.pairs.end());
      report.skipped_distances += dp.skipped;

      std::vector<curation::BinaryMask> pred_masks;
      std::vector<double> scores;
      if (cfg.gt_as_predictions) {
        pred_masks = sample.masks;
        scores.assign(pred_masks.size(), 1.0);
      } else {
        ad::NoGradGuard guard;
        std::vector<int> ids = prompt;
        ids.insert(ids.end(), generated_ids.begin(), generated_ids.end());
        const std::vector<int> pos = grammar::ExtractSegPositions(ids, Vocabulary::kSeg);
        if (!pos.empty() && static_cast<int>(ids.size()) + m->num_image_tokens() <= m->config().max_seq_len) {
          const model::LmOutput lm = m->LmForward(ids, image_tokens);
          const model::Var e = ctp::CtpForwardSample(m->ctp(), ad::GatherRows(lm.hidden, pos));
          for (const model::Var& logits : m->DecodeMasks(e, static_cast<int>(pos.size()), features, image_tokens)) {
            const model::Matrix& v = logits.value();
            curation::BinaryMask bm(static_cast<int>(v.rows()), static_cast<int>(v.cols()));
            double in_sum = 0.0;
            int in_count = 0;
            for (Eigen::Index i = 0; i < v.size(); ++i) {
              const double p = 1.0 / (1.0 + std::exp(-v.data()[i]));
              if (p > 0.5) {
                bm.data[static_cast<size_t>(i)] = 1;
                in_sum += p;
                ++in_count;
              }
            }
            pred_masks.push_back(std::move(bm));
            scores.push_back(in_count ? in_sum / in_count : 0.0);
          }
        }
      }
      for (size_t p = 0; p < response.phrases.size() && p < pred_masks.size(); ++p) {
        const std::optional<int> label = lexicon.Resolve(response.phrases[p].phrase);
        im.predictions.push_back({label.value_or(-1), pred_masks[p], scores[p]});
        if (cfg.dump_overlays && !out_dir.empty()) {
          io::WritePnm(out_dir / "overlays" / (sample.sample_id + "_" + std::to_string(p) + ".ppm"),
                       Overlay(data.images[k], pred_masks[p]));
        }
      }
    }
    csv << sample.sample_id << "," << (parsed ? 1 : 0) << "," << response.phrases.size() << "," << dp.pairs.size()
        << "," << dp.skipped << "\n";
    images.push_back(std::move(im));
    responses.push_back(parsed ? response : grammar::StructuredResponse{});
    annotations.push_back(sample.annotation);
  }

  report.n_depth_pairs = static_cast<int>(depth_pairs.size());
  if (!depth_pairs.empty()) {
    report.depth_acc = metrics::DepthAccuracy(depth_pairs);
    report.abs_rel = metrics::AbsRel(depth_pairs);
  }
  const metrics::SegmentationScores seg = metrics::SegmentationMetrics(images);
  report.miou = seg.miou;
  report.recall = seg.recall;
  report.ap50 = seg.ap50;
  const metrics::HallucinationScores hal = metrics::HallucinationMetrics(responses, annotations, lexicon);
  report.chair_i = hal.chair_i;
  report.cover = hal.cover;
  report.parse_failure_rate = report.n_samples ? static_cast<double>(report.parse_failures) / report.n_samples : 0.0;

  const std::string json = report.ToJson();
  if (!out_dir.empty()) {
    io::WriteFile(out_dir / "metrics.json", json + "\n");
    if (cfg.per_sample_csv) io::WriteFile(out_dir / "per_sample.csv", csv.str());
  }
  out << json << "\n";
  return kExitOk;
}

int Gradcheck(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  gradcheck::Options opts;
  opts.seed = cfg.seed.value_or(0);
  opts.corrupt_group = cfg.corrupt_group;
  const std::vector<gradcheck::GroupResult> results = gradcheck::RunStandardSuite(opts);
  out << gradcheck::FormatTable(results);
  bool ok = true;
  for (const auto& r : results) ok = ok && r.passed;
  out << (ok ? "all groups passed\n" : "gradient check FAILED\n");
  return ok ? kExitOk : kExitVerificationFailed;
}

int Parse(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  std::string text;
  if (cfg.input.empty() || cfg.input == "-") {
    std::ostringstream ss;
    ss << std::cin.rdbuf();
    text = ss.str();
  } else {
    if (!fs::exists(cfg.input)) {
      err << "parse: no such file " << cfg.input << "\n";
      return kExitUsage;
    }
    text = io::ReadFile(cfg.input);
  }
  grammar::StructuredResponse r;
  try {
    r = grammar::ParseResponse(text);
  } catch (const MalformedResponse& e) {
    err << "malformed response: " << e.what() << "\n";
    return kExitVerificationFailed;
  }
  ordered_json j;
  j["assessment"] = r.assessment;
  ordered_json phrases = ordered_json::array();
  for (const auto& p : r.phrases) {
    phrases.push_back({{"phrase", p.phrase}, {"accessibility", ToString(p.accessibility)}, {"seg_index", p.seg_index}});
  }
  j["phrases"] = phrases;
  ordered_json distances = ordered_json::array();
  for (const auto& d : r.distances) distances.push_back({{"object", d.object_name}, {"distance_m", d.distance_m}});
  j["distances"] = distances;
  j["canonical"] = grammar::SerializeResponse(r);
  out << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace walkgpt::commands
