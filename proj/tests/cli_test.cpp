#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "walkgpt/commands.hpp"
#include "walkgpt/io.hpp"

namespace cmd = walkgpt::commands;
namespace io = walkgpt::io;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig =
    R"({"hidden": 32, "n_layers": 1, "n_heads": 2, "channels": 16, "d_proj": 32, "d_vis": 16, "k_bank": 2,)"
    R"( "msqp_heads": 4, "msqp_layers": 1, "k_pos": 8, "k_neg": 4, "batch_size": 2, "lr": 0.002})";

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome Invoke(int (*fn)(const cmd::RunConfig&, std::ostream&, std::ostream&), const cmd::RunConfig& cfg) {
  std::ostringstream out, err;
  Outcome o;
  o.code = fn(cfg, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

// Session, curated dataset, and config shared by the pipeline tests.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    unsetenv("WALK_QGEN_ENDPOINT");
    root_ = fs::temp_directory_path() / "walkgpt_cli";
    fs::remove_all(root_);
    fs::create_directories(root_);
    io::WriteFile(root_ / "config.json", kSmallConfig);
    cmd::RunConfig s;
    s.out = (root_ / "session").string();
    s.frames = 10;
    s.seed = 3;
    ASSERT_EQ(Invoke(cmd::Synth, s).code, 0);
    ASSERT_EQ(Invoke(cmd::Curate, CurateConfig("data")).code, 0);
  }

  static cmd::RunConfig CurateConfig(const std::string& out) {
    cmd::RunConfig c;
    c.input = (root_ / "session").string();
    c.out = (root_ / out).string();
    c.frames = 10;
    c.seed = 1;
    return c;
  }

  static cmd::RunConfig TrainConfig(const std::string& out, long steps) {
    cmd::RunConfig c;
    c.config_path = (root_ / "config.json").string();
    c.input = (root_ / "data").string();
    c.out = (root_ / out).string();
    c.steps = steps;
    c.seed = 5;
    return c;
  }

  static cmd::RunConfig EvalConfig(const std::string& checkpoint, const std::string& out) {
    cmd::RunConfig c;
    c.input = (root_ / "data").string();
    c.checkpoint = checkpoint;
    c.out = (root_ / out).string();
    c.split = "train";
    c.limit = 3;
    c.per_sample_csv = true;
    return c;
  }

  static fs::path root_;
};

fs::path CliPipeline::root_;

}  // namespace

TEST_F(CliPipeline, CurateWritesSummaryAndIsDeterministic) {
  ASSERT_EQ(Invoke(cmd::Curate, CurateConfig("data2")).code, 0);
  for (const char* f : {"samples.jsonl", "curation_summary.json"}) {
    EXPECT_EQ(io::ReadFile(root_ / "data" / f), io::ReadFile(root_ / "data2" / f)) << f;
  }
  const auto summary = nlohmann::json::parse(io::ReadFile(root_ / "data" / "curation_summary.json"));
  EXPECT_EQ(summary.at("frames").get<int>(), 10);
  EXPECT_EQ(summary.at("passed").get<int>(), summary.at("samples").get<int>());
  EXPECT_GT(summary.at("samples").get<int>(), 0);
}

TEST_F(CliPipeline, VerifyDatasetPassesAndFailsOnTamper) {
  cmd::RunConfig v;
  v.input = (root_ / "data").string();
  v.out = (root_ / "verify").string();
  fs::create_directories(v.out);
  EXPECT_EQ(Invoke(cmd::VerifyDataset, v).code, 0);
  EXPECT_TRUE(fs::exists(root_ / "verify" / "verification_report.json"));

  ASSERT_EQ(Invoke(cmd::Curate, CurateConfig("tampered")).code, 0);
  std::string jsonl = io::ReadFile(root_ / "tampered" / "samples.jsonl");
  const size_t pos = jsonl.find("<SEG>");
  ASSERT_NE(pos, std::string::npos);
  jsonl.erase(pos, 5);
  io::WriteFile(root_ / "tampered" / "samples.jsonl", jsonl);
  v.input = (root_ / "tampered").string();
  v.out.clear();
  EXPECT_EQ(Invoke(cmd::VerifyDataset, v).code, 1);
}

TEST_F(CliPipeline, TrainEvalAreByteDeterministic) {
  ASSERT_EQ(Invoke(cmd::Train, TrainConfig("train_a", 3)).code, 0);
  ASSERT_EQ(Invoke(cmd::Train, TrainConfig("train_b", 3)).code, 0);
  for (const char* f : {"checkpoint.wgpt", "train_log.jsonl"}) {
    EXPECT_EQ(io::ReadFile(root_ / "train_a" / f), io::ReadFile(root_ / "train_b" / f)) << f;
  }
  const auto ea = Invoke(cmd::Eval, EvalConfig((root_ / "train_a" / "checkpoint.wgpt").string(), "eval_a"));
  const auto eb = Invoke(cmd::Eval, EvalConfig((root_ / "train_b" / "checkpoint.wgpt").string(), "eval_b"));
  ASSERT_EQ(ea.code, 0) << ea.err;
  ASSERT_EQ(eb.code, 0) << eb.err;
  for (const char* f : {"metrics.json", "per_sample.csv"}) {
    EXPECT_EQ(io::ReadFile(root_ / "eval_a" / f), io::ReadFile(root_ / "eval_b" / f)) << f;
  }
  const auto metrics = nlohmann::json::parse(io::ReadFile(root_ / "eval_a" / "metrics.json"));
  EXPECT_TRUE(metrics.contains("depth_acc"));
}

TEST_F(CliPipeline, ResumedTrainingMatchesStraightRun) {
  ASSERT_EQ(Invoke(cmd::Train, TrainConfig("straight", 4)).code, 0);
  ASSERT_EQ(Invoke(cmd::Train, TrainConfig("half", 2)).code, 0);
  cmd::RunConfig resume = TrainConfig("half", 4);
  resume.checkpoint = (root_ / "half" / "checkpoint.wgpt").string();
  ASSERT_EQ(Invoke(cmd::Train, resume).code, 0);
  EXPECT_EQ(io::ReadFile(root_ / "straight" / "checkpoint.wgpt"), io::ReadFile(root_ / "half" / "checkpoint.wgpt"));
  EXPECT_EQ(io::ReadFile(root_ / "straight" / "train_log.jsonl"), io::ReadFile(root_ / "half" / "train_log.jsonl"));
}

TEST_F(CliPipeline, GroundTruthAsPredictionsScoresPerfectly) {
  cmd::RunConfig c = EvalConfig("", "eval_gt");
  c.gt_as_predictions = true;
  c.split = "train";
  const auto r = Invoke(cmd::Eval, c);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = nlohmann::json::parse(io::ReadFile(root_ / "eval_gt" / "metrics.json"));
  EXPECT_EQ(m.at("depth_acc").get<double>(), 100.0);
  EXPECT_EQ(m.at("miou").get<double>(), 100.0);
}

TEST_F(CliPipeline, SampleFramesPrintsEvenlySpacedIds) {
  cmd::RunConfig c;
  c.input = (root_ / "session").string();
  c.frames = 5;
  const auto r = Invoke(cmd::SampleFrames, c);
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "frame0000\nframe0002\nframe0004\nframe0006\nframe0008\n");
}

TEST(Cli, UsageErrorsExitTwo) {
  const cmd::RunConfig empty;
  EXPECT_EQ(Invoke(cmd::Synth, empty).code, cmd::kExitUsage);
  EXPECT_EQ(Invoke(cmd::Curate, empty).code, cmd::kExitUsage);
  EXPECT_EQ(Invoke(cmd::VerifyDataset, empty).code, cmd::kExitUsage);
  EXPECT_EQ(Invoke(cmd::SampleFrames, empty).code, cmd::kExitUsage);
  EXPECT_EQ(Invoke(cmd::Train, empty).code, cmd::kExitUsage);
  EXPECT_EQ(Invoke(cmd::Eval, empty).code, cmd::kExitUsage);

  const fs::path dir = fs::temp_directory_path() / "walkgpt_cli_empty";
  fs::remove_all(dir);
  fs::create_directories(dir);
  io::WriteFile(dir / "manifest.txt", "");
  cmd::RunConfig c;
  c.input = dir.string();
  c.out = (dir / "out").string();
  const auto r = Invoke(cmd::Curate, c);
  EXPECT_EQ(r.code, cmd::kExitUsage);
  EXPECT_NE(r.err.find("no frames"), std::string::npos);

  cmd::RunConfig e;
  e.input = dir.string();
  EXPECT_EQ(Invoke(cmd::Eval, e).code, cmd::kExitUsage);
}

TEST(Cli, ParseExitCodes) {
  const fs::path dir = fs::temp_directory_path() / "walkgpt_cli_parse";
  fs::remove_all(dir);
  fs::create_directories(dir);
  io::WriteFile(dir / "good.txt",
                "<assessment> Sidewalk ahead. </assessment>\nAccessible features are here:\n<p>sidewalk</p><SEG>\n"
                "<distance>\nDistance from the user to sidewalk: 1.2 m;\n</distance>");
  io::WriteFile(dir / "bad.txt", "<assessment> unterminated");
  cmd::RunConfig c;
  c.input = (dir / "good.txt").string();
  const auto ok = Invoke(cmd::Parse, c);
  EXPECT_EQ(ok.code, 0) << ok.err;
  const auto j = nlohmann::json::parse(ok.out);
  EXPECT_EQ(j.at("assessment").get<std::string>(), "Sidewalk ahead.");
  c.input = (dir / "bad.txt").string();
  EXPECT_EQ(Invoke(cmd::Parse, c).code, cmd::kExitVerificationFailed);
  c.input = (dir / "missing.txt").string();
  EXPECT_EQ(Invoke(cmd::Parse, c).code, cmd::kExitUsage);
}

TEST(Cli, GradcheckCorruptionFails) {
  cmd::RunConfig c;
  EXPECT_EQ(Invoke(cmd::Gradcheck, c).code, 0);
  c.corrupt_group = "dice";
  const auto r = Invoke(cmd::Gradcheck, c);
  EXPECT_EQ(r.code, cmd::kExitVerificationFailed);
  EXPECT_NE(r.out.find("FAILED"), std::string::npos);
}
