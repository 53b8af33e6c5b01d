#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "commands.hpp"
#include "fln/error.hpp"
#include "fln/io.hpp"

using namespace flnlab;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> small_overrides() {
  return {"data.scenes=80",      "data.max_agents=3",       "model.d_model=8",
          "model.heads=2",       "model.ffn_hidden=8",      "model.decoder_hidden=8",
          "model.modes=2",       "model.horizon=4",         "fln.lengths=2,4,6",
          "train.epochs=2",      "train.batch_size=16",     "eval.samples=2"};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("flnlab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  CommonOptions common(const std::string& out) const {
    CommonOptions c;
    c.out = (root_ / out).string();
    c.seed = 3;
    c.deterministic = true;
    c.overrides = small_overrides();
    return c;
  }

  std::string path(const std::string& rel) const { return (root_ / rel).string(); }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, GenerateTrainEvalSweepProbe) {
  std::ostringstream log;
  ASSERT_EQ(cmd_generate(common("data"), log), 0);
  EXPECT_TRUE(fs::exists(path("data/manifest.json")));
  EXPECT_TRUE(fs::exists(path("data/positions.bin")));

  TrainOptions train;
  train.data = path("data");
  ASSERT_EQ(cmd_train(common("run"), train, log), 0);
  for (const char* f : {"run/checkpoint.ckpt", "run/train_log.csv", "run/train_summary.json"}) {
    EXPECT_TRUE(fs::exists(path(f))) << f;
  }
  const auto summary = nlohmann::json::parse(fln::io::read_file(path("run/train_summary.json")));
  EXPECT_EQ(summary["config"]["fln.lengths"], "2,4,6");

  EvalOptions eval;
  eval.checkpoint = path("run/checkpoint.ckpt");
  eval.data = path("data");
  eval.length = 3;
  ASSERT_EQ(cmd_eval(common("eval"), eval, log), 0);
  const auto metrics = nlohmann::json::parse(fln::io::read_file(path("eval/eval_metrics.json")));
  EXPECT_EQ(metrics["branch"], "M");  // 3 is as close to 2 as to 4; ties go long
  EXPECT_EQ(metrics["samples"], 2);
  EXPECT_GT(metrics["ade"].get<double>(), 0.0);

  eval.length = 1;
  EXPECT_THROW(cmd_eval(common("eval"), eval, log), fln::RoutingError);

  SweepOptions sweep;
  sweep.checkpoint = eval.checkpoint;
  sweep.data = eval.data;
  ASSERT_EQ(cmd_sweep(common("sweep"), sweep, log), 0);
  const std::string csv = fln::io::read_file(path("sweep/sweep.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);  // header + lengths 2..6
  // Each sweep row is the line cmd_eval writes for that length.
  eval.length = 3;
  ASSERT_EQ(cmd_eval(common("eval"), eval, log), 0);
  const std::string eval_csv = fln::io::read_file(path("eval/eval_metrics.csv"));
  const std::string eval_row = eval_csv.substr(eval_csv.find('\n') + 1);
  EXPECT_NE(csv.find("\n" + eval_row), std::string::npos) << eval_row;
  sweep.lengths = "2..x";
  EXPECT_THROW(cmd_sweep(common("sweep"), sweep, log), UsageError);

  ProbeOptions ln;
  ln.kind = "ln";
  ln.checkpoints = {eval.checkpoint};
  ln.data = eval.data;
  ln.length = 4;
  ASSERT_EQ(cmd_probe(common("probe"), ln, log), 0);
  EXPECT_TRUE(fs::exists(path("probe/ln_probe_0.csv")));
  const auto probe = nlohmann::json::parse(fln::io::read_file(path("probe/ln_probe.json")));
  EXPECT_EQ(probe[0]["branch"], "M");

  ProbeOptions pe;
  pe.kind = "pe";
  pe.h1 = 4;
  pe.h2 = 6;
  ASSERT_EQ(cmd_probe(common("probe"), pe, log), 0);
  const std::string pe_csv = fln::io::read_file(path("probe/pe_deviation.csv"));
  EXPECT_EQ(std::count(pe_csv.begin(), pe_csv.end(), '\n'), 5);
  pe.h2 = 4;
  ASSERT_EQ(cmd_probe(common("probe"), pe, log), 0);
  EXPECT_EQ(fln::io::read_file(path("probe/pe_deviation.csv")),
            "timestep,h1,h2,distance\n0,4,4,0\n1,4,4,0\n2,4,4,0\n3,4,4,0\n");
  pe.checkpoints = {eval.checkpoint, eval.checkpoint};
  ASSERT_EQ(cmd_probe(common("probe"), pe, log), 0);
}

TEST_F(Cli, LnProbeOnTwoCheckpointsGivesAlignedReports) {
  std::ostringstream log;
  ASSERT_EQ(cmd_generate(common("data"), log), 0);
  TrainOptions train;
  train.data = path("data");
  train.strategy = "isolated";
  for (std::size_t h : {2u, 6u}) {
    train.length = h;
    ASSERT_EQ(cmd_train(common("it" + std::to_string(h)), train, log), 0);
  }
  ProbeOptions ln;
  ln.kind = "ln";
  ln.checkpoints = {path("it2/checkpoint.ckpt"), path("it6/checkpoint.ckpt")};
  ln.data = path("data");
  ASSERT_EQ(cmd_probe(common("probe"), ln, log), 0);
  const auto rows = [](const std::string& csv) { return std::count(csv.begin(), csv.end(), '\n'); };
  const std::string a = fln::io::read_file(path("probe/ln_probe_0.csv"));
  const std::string b = fln::io::read_file(path("probe/ln_probe_1.csv"));
  EXPECT_EQ(a.substr(0, a.find('\n')), b.substr(0, b.find('\n')));
  EXPECT_EQ(rows(a), 1 + 2 * 2);  // enc0.attn and enc0.ffn over 2 positions
  EXPECT_EQ(rows(b), 1 + 2 * 6);
}

TEST_F(Cli, GenerateValidatesBeforeWriting) {
  std::ostringstream log;
  CommonOptions c = common("data");
  c.overrides.push_back("data.scenes=0");
  EXPECT_THROW(cmd_generate(c, log), fln::ConfigError);
  EXPECT_FALSE(fs::exists(path("data")));
  ASSERT_EQ(cmd_generate(common("data"), log), 0);
  const auto manifest = nlohmann::json::parse(fln::io::read_file(path("data/manifest.json")));
  EXPECT_EQ(manifest["seed"], 3);
  EXPECT_EQ(manifest["scene_count"], 80);
}

TEST_F(Cli, UsageErrors) {
  std::ostringstream log;
  ASSERT_EQ(cmd_generate(common("data"), log), 0);
  TrainOptions train;
  train.data = path("data");
  train.strategy = "isolated";
  EXPECT_THROW(cmd_train(common("run"), train, log), UsageError);
  train.strategy = "bogus";
  EXPECT_THROW(cmd_train(common("run"), train, log), fln::ConfigError);
  train.strategy.reset();
  train.data.clear();
  EXPECT_THROW(cmd_train(common("run"), train, log), UsageError);

  CommonOptions bad = common("run");
  bad.overrides.push_back("train.epochs");
  EXPECT_THROW(resolve_config(bad), UsageError);
  bad.overrides.back() = "model.heads=3";
  EXPECT_THROW(resolve_config(bad), fln::ConfigError);

  EvalOptions eval;
  eval.data = path("data");
  eval.length = 4;
  EXPECT_THROW(cmd_eval(common("eval"), eval, log), UsageError);  // no checkpoint

  ProbeOptions probe;
  probe.kind = "weights";
  EXPECT_THROW(cmd_probe(common("probe"), probe, log), UsageError);
  probe.kind = "pe";
  EXPECT_THROW(cmd_probe(common("probe"), probe, log), UsageError);
  probe.kind = "ln";
  EXPECT_THROW(cmd_probe(common("probe"), probe, log), UsageError);
}

TEST_F(Cli, IsolatedRunWithExplicitLength) {
  std::ostringstream log;
  ASSERT_EQ(cmd_generate(common("data"), log), 0);
  TrainOptions train;
  train.data = path("data");
  train.strategy = "isolated";
  train.length = 4;
  ASSERT_EQ(cmd_train(common("run"), train, log), 0);
  SweepOptions sweep;
  sweep.checkpoint = path("run/checkpoint.ckpt");
  sweep.data = path("data");
  ASSERT_EQ(cmd_sweep(common("sweep"), sweep, log), 0);
  const std::string csv = fln::io::read_file(path("sweep/sweep.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);  // header + lengths 1..4
}

TEST_F(Cli, SameSeedGivesIdenticalOutputs) {
  std::ostringstream log;
  for (const char* run : {"a", "b"}) {
    const std::string r = run;
    ASSERT_EQ(cmd_generate(common(r + "/data"), log), 0);
    TrainOptions train;
    train.data = path(r + "/data");
    ASSERT_EQ(cmd_train(common(r + "/run"), train, log), 0);
    EvalOptions eval;
    eval.checkpoint = path(r + "/run/checkpoint.ckpt");
    eval.data = train.data;
    eval.length = 5;
    ASSERT_EQ(cmd_eval(common(r + "/eval"), eval, log), 0);
  }
  EXPECT_EQ(fln::io::read_file(path("a/data/positions.bin")), fln::io::read_file(path("b/data/positions.bin")));
  EXPECT_EQ(fln::io::read_file(path("a/run/checkpoint.ckpt")), fln::io::read_file(path("b/run/checkpoint.ckpt")));
  auto a = nlohmann::json::parse(fln::io::read_file(path("a/eval/eval_metrics.json")));
  auto b = nlohmann::json::parse(fln::io::read_file(path("b/eval/eval_metrics.json")));
  a.erase("checkpoint");
  b.erase("checkpoint");
  EXPECT_EQ(a, b);

  CommonOptions other = common("c/data");
  other.seed = 4;
  ASSERT_EQ(cmd_generate(other, log), 0);
  EXPECT_NE(fln::io::read_file(path("a/data/positions.bin")), fln::io::read_file(path("c/data/positions.bin")));
}
