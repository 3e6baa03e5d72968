#pragma once

// Subcommand implementations behind the `walkgpt` binary. Each returns the
// process exit code: 0 success, 1 verification failure, 2 usage or input
// error.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

namespace walkgpt::commands {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerificationFailed = 1;
inline constexpr int kExitUsage = 2;

struct RunConfig {
  std::optional<std::string> config_path;  // JSON: model config keys plus "dataset", "lexicon"
  std::optional<uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string split = "train";
  std::optional<int> limit;
  bool dump_overlays = false;

  std::string input;    // session dir (curate, sample-frames), dataset dir (verify, train, eval), file (parse)
  std::string lexicon;  // eval
  int frames = 100;     // curate / sample-frames / synth
  std::optional<long> steps;  // train: overrides epochs
  std::string corrupt_group;  // gradcheck test hook
  bool gt_as_predictions = false;  // eval: score ground-truth answers
  bool per_sample_csv = false;     // eval
  double val_fraction = 0.2;       // curate
};

int Synth(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int Curate(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int VerifyDataset(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int SampleFrames(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int Train(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int Eval(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int Gradcheck(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int Parse(const RunConfig& cfg, std::ostream& out, std::ostream& err);

}  // namespace walkgpt::commands
