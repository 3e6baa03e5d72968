#include <CLI11.hpp>
#include <iostream>

#include "walkgpt/commands.hpp"
#include "walkgpt/errors.hpp"

namespace cmd = walkgpt::commands;

int main(int argc, char** argv) {
  CLI::App app{"walkgpt: grounded pedestrian-accessibility VLM toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  cmd::RunConfig cfg;
  std::string config_path;
  uint64_t seed = 0;
  int limit = -1;
  app.add_option("--config", config_path, "JSON config (model keys, dataset, lexicon)");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--out", cfg.out, "output directory");
  app.add_option("--checkpoint", cfg.checkpoint, "checkpoint to load or resume from");
  app.add_option("--split", cfg.split, "dataset split (train or val)");
  app.add_option("--limit", limit, "maximum number of samples or frames");
  app.add_flag("--dump-overlays", cfg.dump_overlays, "write predicted mask overlays");

  auto* synth = app.add_subcommand("synth", "write a synthetic capture session");
  synth->add_option("--frames", cfg.frames, "number of frames");

  auto* curate = app.add_subcommand("curate", "build a verified VQA dataset from a capture session");
  curate->add_option("--input", cfg.input, "session directory")->required();
  curate->add_option("--frames", cfg.frames, "frames to sample");
  curate->add_option("--val-fraction", cfg.val_fraction, "fraction of samples assigned to val");

  auto* verify = app.add_subcommand("verify-dataset", "check every sample against the answer grammar");
  verify->add_option("--input", cfg.input, "dataset directory");

  auto* sample = app.add_subcommand("sample-frames", "print evenly spaced frame ids");
  sample->add_option("--input", cfg.input, "session directory or manifest")->required();
  sample->add_option("--frames", cfg.frames, "frames to sample");

  long steps = -1;
  auto* train = app.add_subcommand("train", "train or resume the model");
  train->add_option("--input", cfg.input, "dataset directory");
  train->add_option("--steps", steps, "total optimizer steps (overrides epochs)");

  auto* eval = app.add_subcommand("eval", "generate answers and compute metrics");
  eval->add_option("--input", cfg.input, "dataset directory");
  eval->add_option("--lexicon", cfg.lexicon, "lexicon file");
  eval->add_flag("--gt-as-predictions", cfg.gt_as_predictions, "score ground-truth answers and masks");
  eval->add_flag("--per-sample-csv", cfg.per_sample_csv, "write per_sample.csv");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad->add_option("--corrupt", cfg.corrupt_group, "perturb one group's analytic gradient");

  auto* parse = app.add_subcommand("parse", "parse a structured response");
  parse->add_option("input", cfg.input, "response file, or - for stdin");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cmd::kExitOk : cmd::kExitUsage;
  }
  if (!config_path.empty()) cfg.config_path = config_path;
  if (app.count("--seed")) cfg.seed = seed;
  if (limit >= 0) cfg.limit = limit;
  if (steps >= 0) cfg.steps = steps;

  try {
    if (synth->parsed()) return cmd::Synth(cfg, std::cout, std::cerr);
    if (curate->parsed()) return cmd::Curate(cfg, std::cout, std::cerr);
    if (verify->parsed()) return cmd::VerifyDataset(cfg, std::cout, std::cerr);
    if (sample->parsed()) return cmd::SampleFrames(cfg, std::cout, std::cerr);
    if (train->parsed()) return cmd::Train(cfg, std::cout, std::cerr);
    if (eval->parsed()) return cmd::Eval(cfg, std::cout, std::cerr);
    if (grad->parsed()) return cmd::Gradcheck(cfg, std::cout, std::cerr);
    if (parse->parsed()) return cmd::Parse(cfg, std::cout, std::cerr);
  } catch (const walkgpt::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cmd::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cmd::kExitUsage;
  }
  return cmd::kExitUsage;
}
