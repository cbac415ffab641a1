#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "combo/cli.hpp"
#include "combo/plot.hpp"
#include "json.hpp"
#include "test_util.hpp"

namespace combo {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Run {
  int code;
  std::string out, err;
  json out_json() const { return json::parse(out); }
  json err_json() const { return json::parse(err.substr(0, err.find('\n'))); }
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "combo");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;
  fs::path config;

  void SetUp() override {
    dir = testing::scratch_dir(std::string("cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    config = dir / "run.json";
    const json j = {
        {"synth",
         {{"backbones", {{{"id", "sig"}, {"num_layers", 2}, {"tokens", 16}, {"dim", 8}},
                         {{"id", "noise"}, {"num_layers", 1}, {"tokens", 16}, {"dim", 8}}}},
          {"num_classes", 2},
          {"splits", {{"train", 64}, {"val", 32}, {"test", 16}}},
          {"signals", {{{"backbone", "sig"}, {"layer", 2}, {"snr", 3.0}, {"encoding", "pooled-linear"}}}},
          {"seed", 4}}},
        {"dataset", (dir / "ds").string()},
        {"adapter", {{"compress_dim", 16}, {"embed_dim", 16}, {"depth", 1}, {"num_heads", 2}, {"mlp_ratio", 2}}},
        {"train", {{"epochs", 6}, {"warmup_epochs", 1}, {"batch_size", 16}, {"peak_lr", 0.003}}},
        {"probe", {{"steps", 30}, {"lr_grid", {0.1, 0.01}}}},
        {"score", {{"seeds", {0, 1}}, {"lambda", 0.01}}}};
    write_text(config, j.dump(2));
    ASSERT_EQ(run({"synth", "--config", config.string(), "--out", (dir / "ds").string()}).code, 0);
  }
};

TEST_F(Cli, InspectSummarizesTheDataset) {
  const auto r = run({"inspect", "--config", config.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = r.out_json();
  EXPECT_EQ(j.at("K"), 2);
  EXPECT_EQ(j.at("D_total"), 24);
  EXPECT_EQ(j.at("tokens"), 16);
  EXPECT_EQ(j.at("num_samples"), 112);
}

TEST_F(Cli, TrainWritesReportAndCheckpointThenEvalReadsIt) {
  const auto out = dir / "train";
  const auto r = run({"train", "--config", config.string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = r.out_json();
  EXPECT_EQ(report.at("kind"), "train_report");
  EXPECT_TRUE(report.contains("run_config"));
  EXPECT_EQ(json::parse(slurp(out / "report.json")), report);
  ASSERT_TRUE(fs::exists(out / "checkpoint.cmbc"));

  const auto e = run({"eval", "--config", config.string(), "--checkpoint", (out / "checkpoint.cmbc").string(),
                      "--split", "test", "--out", (dir / "eval.json").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(e.out_json(), json::parse(slurp(dir / "eval.json")));
  EXPECT_GE(e.out_json().at("accuracy").get<double>(), 0.0);
}

TEST_F(Cli, TrainIsByteIdenticalAcrossRuns) {
  ASSERT_EQ(run({"train", "--config", config.string(), "--out", (dir / "a").string()}).code, 0);
  ASSERT_EQ(run({"train", "--config", config.string(), "--out", (dir / "b").string()}).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "report.json"), slurp(dir / "b" / "report.json"));
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.cmbc"), slurp(dir / "b" / "checkpoint.cmbc"));
}

TEST_F(Cli, ScoreSelectProbeAndPlot) {
  const auto s = run({"score", "--config", config.string(), "--out", (dir / "scores.json").string()});
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(s.out_json().at("kind"), "importance_report");
  EXPECT_EQ(s.out_json().at("ranking").front(), "sig");

  const auto sel = run({"select", "--config", config.string(), "--report", (dir / "scores.json").string(),
                        "--top-n", "1", "--out", (dir / "sel").string()});
  ASSERT_EQ(sel.code, 0) << sel.err;
  EXPECT_EQ(sel.out_json().at("selection").at("kept"), json::array({"sig"}));

  const auto p = run({"probe", "--config", config.string(), "--out", (dir / "probe.json").string()});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_EQ(p.out_json().at("kind"), "layer_sweep");

  const auto pl = run({"plot", (dir / "probe.json").string(), (dir / "scores.json").string(),
                       (dir / "sel" / "report.json").string(), "--out", (dir / "svg").string()});
  ASSERT_EQ(pl.code, 0) << pl.err;
  std::size_t svgs = 0;
  for (const auto& entry : fs::directory_iterator(dir / "svg")) {
    ++svgs;
    EXPECT_EQ(slurp(entry.path()).rfind("<svg", 0), 0u) << entry.path();
  }
  EXPECT_EQ(svgs, 3u);
}

TEST_F(Cli, ErrorsAreStructuredWithExitCodes) {
  auto r = run({"train", "--config", (dir / "missing.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err_json().at("error").at("kind"), "config");

  write_text(dir / "bad.json", R"({"train": {"epochs": 2, "surprise": 1}})");
  r = run({"train", "--config", (dir / "bad.json").string(), "--dataset", (dir / "ds").string()});
  EXPECT_EQ(r.code, 2);

  r = run({"inspect", "--dataset", (dir / "nowhere").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.err_json().at("error").at("exit_code"), 3);

  r = run({"train", "--config", config.string(), "--layers", "middle"});
  EXPECT_EQ(r.code, 2);

  r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  r = run({});
  EXPECT_EQ(r.code, 2);
}

TEST(RunConfig, JsonRoundTripAndStrictness) {
  RunConfig c;
  c.dataset = "/data/x";
  c.top_n = 2;
  c.layers = LayerMode::last_half;
  c.score_seeds = {5, 6};
  const auto back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(run_config_from_json(json{{"datasett", "x"}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"score", {{"seeds", json::array()}}}}), ConfigError);
}

TEST(Plot, RejectsUnknownKinds) {
  EXPECT_THROW(render_svg(json{{"kind", "pie"}}), Error);
  EXPECT_THROW(render_svg(json::array()), Error);
}

}  // namespace
}  // namespace combo
