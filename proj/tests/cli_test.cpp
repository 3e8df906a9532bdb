#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "criteria.hpp"
#include "rama/report.hpp"

using namespace rama;
namespace fs = std::filesystem;

namespace {

struct Output {
  int code = -1;
  std::string text;  // stdout and stderr
};

Output run_cli(const std::string& args) {
  const std::string cmd = std::string(RAMA_CLI_PATH) + " " + args + " 2>&1";
  Output out;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) out.text.append(buf, n);
  const int status = ::pclose(pipe);
  out.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("rama_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) +
                                        "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }

  fs::path tiny_config() {
    return write("tiny.cfg",
                 "trainer.batch = 4\ntrainer.seq_len = 8\naddressing.m = 4\ntrainer.collect_interval = 2\n"
                 "world.deter = 8\nworld.stoch = 4\nworld.hidden = 16\nagent.hidden = 16\nagent.horizon = 3\n"
                 "addressing.hidden = 8\naddressing.embed_dim = 8\ntrainer.env_steps = 200\n");
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, MissingConfigExitsTwoNamingThePath) {
  const auto r = run_cli("train --config " + (dir_ / "absent.cfg").string() + " --out " + (dir_ / "o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.text.find("absent.cfg"), std::string::npos) << r.text;
}

TEST_F(Cli, BadArgumentsAndValuesExitTwo) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  const auto r = run_cli("train --config " + tiny_config().string() + " --set trainer.p=2 --out " + (dir_ / "o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.text.find("trainer.p"), std::string::npos) << r.text;
}

TEST_F(Cli, TrainWritesManifestAndArtifacts) {
  const fs::path out = dir_ / "run";
  const auto r = run_cli("train --config " + tiny_config().string() + " --seed 3 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.text;
  for (const char* f : {"manifest.json", "config.txt", "checkpoint.bin", "episodes_0.csv", "train_0.csv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  std::ifstream in(out / "manifest.json");
  const auto m = nlohmann::json::parse(in);
  EXPECT_EQ(m["seeds"]["trainer"], 3);
  EXPECT_NE(m["config"].get<std::string>().find("addressing.objective = none"), std::string::npos);
  EXPECT_TRUE(m.contains("build"));
  EXPECT_TRUE(m.contains("start_time"));
  const RamaConfig echo = load_config((out / "config.txt").string());
  EXPECT_EQ(echo.seed, 3u);
  EXPECT_EQ(echo.n, 4);
  EXPECT_EQ(summarize_buffer(out / "buffer").episodes, 2u);
}

TEST_F(Cli, ResumeKeepsTheEnvStepCounterMonotone) {
  const fs::path out = dir_ / "run";
  ASSERT_EQ(run_cli("train --config " + tiny_config().string() + " --out " + out.string()).code, 0);
  const auto r = run_cli("train --resume " + (out / "checkpoint.bin").string() + " --set trainer.env_steps=400 --out " +
                         out.string());
  ASSERT_EQ(r.code, 0) << r.text;
  const Curve c = read_episode_csv(out / "episodes_0.csv");
  ASSERT_EQ(c.x.size(), 4u);
  for (std::size_t i = 1; i < c.x.size(); ++i) EXPECT_GT(c.x[i], c.x[i - 1]);
  EXPECT_EQ(c.x.back(), 400.0);
}

TEST_F(Cli, EvalIsDeterministicAndBounded) {
  const fs::path out = dir_ / "run";
  ASSERT_EQ(run_cli("train --config " + tiny_config().string() + " --out " + out.string()).code, 0);
  const std::string ck = (out / "checkpoint.bin").string();
  const auto a = run_cli("eval --checkpoint " + ck + " --episodes 2 --seed 5");
  const auto b = run_cli("eval --checkpoint " + ck + " --episodes 2 --seed 5");
  ASSERT_EQ(a.code, 0) << a.text;
  EXPECT_EQ(a.text, b.text);
  const auto at = a.text.find("mean_return ");
  ASSERT_NE(at, std::string::npos);
  const double v = std::stod(a.text.substr(at + 12));
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 100.0);
  EXPECT_EQ(run_cli("eval --checkpoint " + ck + " --task Loco/walk --episodes 1").code, 0);
  EXPECT_EQ(run_cli("eval --checkpoint " + ck + " --episodes 0").code, 2);
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir_ / "none.bin").string()).code, 3);
}

TEST_F(Cli, PlotSingleAndMultipleCurves) {
  const auto a = write("a.csv", "episode_idx,env_steps,return,wall_ms\n0,100,1.5,3\n1,200,2.5,6\n");
  const auto b = write("b.csv", "episode_idx,env_steps,return,wall_ms\n0,100,4,3\n");
  const fs::path svg = dir_ / "out.svg";
  auto r = run_cli("plot " + a.string() + " --out " + svg.string());
  ASSERT_EQ(r.code, 0) << r.text;
  EXPECT_NE(r.text.find("1 curve"), std::string::npos);
  std::ifstream in(svg);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str().rfind("<svg", 0), 0u);
  r = run_cli("plot " + a.string() + " " + b.string() + " --out " + svg.string());
  EXPECT_NE(r.text.find("2 curves"), std::string::npos);

  const auto bad = write("bad.csv", "episode_idx,env_steps,return,wall_ms\n0,100,1,1\n1,two,1,1\n");
  r = run_cli("plot " + bad.string() + " --out " + svg.string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.text.find("bad.csv:3"), std::string::npos) << r.text;
}

TEST_F(Cli, InspectBuffer) {
  save_buffer(MultitaskBuffer{}, dir_ / "empty");
  auto r = run_cli("inspect-buffer " + (dir_ / "empty").string());
  ASSERT_EQ(r.code, 0) << r.text;
  EXPECT_NE(r.text.find("0 episodes"), std::string::npos);

  MultitaskBuffer b;
  b.append(rama::testing::rollout_episode(0, criteria::kStand, 1));
  b.append(rama::testing::rollout_episode(1, criteria::kStand, 2));
  b.append(rama::testing::rollout_episode(2, criteria::kWalk, 3));
  save_buffer(b, dir_ / "buf");
  r = run_cli("inspect-buffer " + (dir_ / "buf").string());
  EXPECT_NE(r.text.find("3 episodes"), std::string::npos) << r.text;
  EXPECT_NE(r.text.find("Loco/stand: 2"), std::string::npos);
  EXPECT_NE(r.text.find("Loco/walk: 1"), std::string::npos);
  EXPECT_NE(r.text.find("return histogram"), std::string::npos);

  fs::resize_file(dir_ / "buf" / "episode_2.bin", 20);
  r = run_cli("inspect-buffer " + (dir_ / "buf").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.text.find("2 episodes"), std::string::npos) << r.text;
  EXPECT_NE(r.text.find("unreadable"), std::string::npos);
}
