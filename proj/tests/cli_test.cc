// Copyright 2026 The FlowTrack Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <cstdio>
#include <sstream>

#include <gtest/gtest.h>

#include "flowtrack/cli.hpp"
#include "test_util.hpp"

namespace flowtrack {
namespace {

namespace fs = std::filesystem;
using testing::ScratchDir;
using testing::Sinusoid;

struct Outcome {
  int code = -1;
  std::string out, err;
};

Outcome Invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "flowtrack");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Outcome o;
  o.code = RunCli(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::string Field(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind(key + ": ", 0) == 0) return line.substr(key.size() + 2);
  }
  return "";
}

// Two short training motions plus a tiny train config.
struct Workspace {
  fs::path dir, motions, train_cfg, refine_cfg;
};

Workspace MakeWorkspace(const std::string& name) {
  Workspace w;
  w.dir = ScratchDir(name);
  w.motions = w.dir / "motions";
  fs::create_directories(w.motions);
  SaveMotion(Sinusoid(0.3, 0.25, 2.0), w.motions / "slow.json");
  SaveMotion(Sinusoid(0.3, 0.5, 2.0), w.motions / "fast.json");
  w.train_cfg = w.dir / "train.json";
  WriteFileAtomic(w.train_cfg, R"({"iterations": 2, "episodes_per_iteration": 1,
    "gradient_steps": 5, "batch_size": 16, "hidden": [16], "checkpoint_every": 1})");
  w.refine_cfg = w.dir / "refine.json";
  WriteFileAtomic(w.refine_cfg, R"({"population": 2, "generations": 2, "episodes_per_eval": 1,
    "hidden": [8]})");
  return w;
}

TEST(Analyze, ReportsClipsInFilenameOrder) {
  const fs::path dir = ScratchDir("cli_analyze");
  SaveMotion(Sinusoid(0.3, 0.5), dir / "b_wave.json");
  SaveMotion(Sinusoid(0.0, 0.5), dir / "a_static.json");
  SaveMotion(Sinusoid(0.6, 1.0), dir / "c_fast.json");
  const Outcome o = Invoke({"analyze", dir.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto report = nlohmann::json::parse(o.out);
  ASSERT_EQ(report.size(), 3u);
  EXPECT_EQ(report[0]["motion"], "a_static");
  EXPECT_EQ(report[1]["motion"], "b_wave");
  EXPECT_EQ(report[2]["motion"], "c_fast");
  for (double s : report[0]["scores"]) EXPECT_EQ(s, 0.0);
  EXPECT_EQ(report[0]["scores"].size(), 6u);
  EXPECT_GT(report[2]["raw"]["v_max"].get<double>(), report[1]["raw"]["v_max"].get<double>());
}

TEST(Analyze, RerunIsByteIdentical) {
  const fs::path dir = ScratchDir("cli_analyze_rerun");
  SaveMotion(Sinusoid(0.3, 0.5), dir / "m.json");
  ASSERT_EQ(Invoke({"--out", (dir / "r1.json").string(), "analyze", (dir / "m.json").string()}).code, 0);
  ASSERT_EQ(Invoke({"--out", (dir / "r2.json").string(), "analyze", (dir / "m.json").string()}).code, 0);
  EXPECT_EQ(ReadFile(dir / "r1.json"), ReadFile(dir / "r2.json"));
}

TEST(Analyze, BadFilesWarnUnlessAllFail) {
  const fs::path dir = ScratchDir("cli_analyze_bad");
  WriteFileAtomic(dir / "broken.json", "{");
  SaveMotion(Sinusoid(0.3, 0.5), dir / "ok.json");
  Outcome o = Invoke({"analyze", dir.string()});
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.err.find("broken.json"), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(o.out).size(), 1u);
  fs::remove(dir / "ok.json");
  o = Invoke({"analyze", dir.string()});
  EXPECT_NE(o.code, 0);
}

TEST(Actuator, ClipsAboveKnee) {
  const Outcome o = Invoke({"actuator", "7520-22.5", "--v", "18.6", "--tau", "200"});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(Field(o.out, "clipped"), "55.5");
  EXPECT_EQ(Field(o.out, "limit"), "55.5");
}

TEST(Actuator, AtRestPassesTorque) {
  const Outcome o = Invoke({"actuator", "7520-22.5", "--v", "0", "--tau", "50"});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(Field(o.out, "friction"), "0");
  EXPECT_EQ(Field(o.out, "applied"), "50");
  EXPECT_EQ(Field(o.out, "power"), "0");
}

TEST(Actuator, SweepLimitNeverRises) {
  const Outcome o = Invoke({"actuator", "5020-16", "--sweep", "--tau", "30"});
  ASSERT_EQ(o.code, 0) << o.err;
  std::istringstream in(o.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "v,limit,clipped,friction,applied,power");
  double prev = 1e300;
  int rows = 0;
  while (std::getline(in, line)) {
    const size_t a = line.find(',');
    const double limit = std::stod(line.substr(a + 1, line.find(',', a + 1) - a - 1));
    EXPECT_LE(limit, prev);
    prev = limit;
    ++rows;
  }
  EXPECT_GT(rows, 10);
  EXPECT_EQ(prev, 0.0);
}

TEST(Actuator, UnknownNameListsCatalog) {
  const Outcome o = Invoke({"actuator", "9999-1"});
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("7520-22.5"), std::string::npos);
  EXPECT_NE(o.err.find("4010-25"), std::string::npos);
}

TEST(Synth, WritesLoadableClip) {
  const fs::path dir = ScratchDir("cli_synth");
  const Outcome o = Invoke({"--out", (dir / "s.json").string(), "synth", "--joints", "3",
                         "--duration", "4", "--frequency", "0.5", "0.25", "1"});
  ASSERT_EQ(o.code, 0) << o.err;
  const MotionClip m = LoadMotion(dir / "s.json");
  EXPECT_EQ(m.joints(), 3);
  EXPECT_EQ(m.frames(), 200);
}

TEST(Train, SmokeRunWritesArtifacts) {
  const Workspace w = MakeWorkspace("cli_train");
  const fs::path out = w.dir / "run";
  const Outcome o = Invoke({"--out", out.string(), "train", "--motions", w.motions.string(), "--cfg",
                         w.train_cfg.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("final loss: "), std::string::npos);
  const VelocityFieldNet net = LoadPolicy(out / "policy.json");
  EXPECT_EQ(net.obs_dim(), 41);
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "policy_00001.json"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "policy_00002.json"));
  const std::string csv = ReadFile(out / "history.csv");
  EXPECT_EQ(csv.rfind("iteration,loss,buffer_size\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const auto cfg = nlohmann::json::parse(ReadFile(out / "config.json"));
  EXPECT_EQ(cfg["seed"], kDefaultSeed);
  EXPECT_EQ(cfg["motions"][0], "fast");
  EXPECT_EQ(cfg["train"]["iterations"], 2);
}

TEST(Train, SameSeedSameResult) {
  const Workspace w = MakeWorkspace("cli_train_det");
  auto run = [&](const std::string& tag, const std::string& seed) {
    const fs::path out = w.dir / tag;
    const Outcome o = Invoke({"--seed", seed, "--quiet", "--out", out.string(), "train", "--motions",
                           w.motions.string(), "--cfg", w.train_cfg.string()});
    EXPECT_EQ(o.code, 0) << o.err;
    return ReadFile(out / "policy.json") + ReadFile(out / "history.csv") + o.out;
  };
  EXPECT_EQ(run("a", "3"), run("b", "3"));
  EXPECT_NE(run("a", "3"), run("c", "4"));
}

TEST(Train, OverridesApply) {
  const Workspace w = MakeWorkspace("cli_train_set");
  const fs::path out = w.dir / "run";
  const Outcome o = Invoke({"--quiet", "--out", out.string(), "--set", "train.iterations=1",
                         "--set", "env.history=2", "train", "--motions", w.motions.string(),
                         "--cfg", w.train_cfg.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(LoadPolicy(out / "policy.json").obs_dim(), 6 + 5 + 2 * 6);
  const auto cfg = nlohmann::json::parse(ReadFile(out / "config.json"));
  EXPECT_EQ(cfg["train"]["iterations"], 1);
}

TEST(Train, ConfigErrorsExitOne) {
  const Workspace w = MakeWorkspace("cli_train_bad");
  const fs::path out = w.dir / "run";
  EXPECT_EQ(Invoke({"--out", out.string(), "--set", "train.iteratons=1", "train", "--motions",
                 w.motions.string()}).code, 1);
  EXPECT_EQ(Invoke({"--out", out.string(), "--set", "bogus.x=1", "train", "--motions",
                 w.motions.string()}).code, 1);
  SaveMotion(Sinusoid(0.3, 0.5, 2.0, 3), w.motions / "three.json");
  EXPECT_EQ(Invoke({"--out", out.string(), "train", "--motions", w.motions.string()}).code, 1);
  EXPECT_FALSE(fs::exists(out / "policy.json"));
}

TEST(Eval, JsonMatchesSchema) {
  const Workspace w = MakeWorkspace("cli_eval");
  const fs::path run = w.dir / "run";
  ASSERT_EQ(Invoke({"--quiet", "--out", run.string(), "train", "--motions", w.motions.string(),
                 "--cfg", w.train_cfg.string()}).code, 0);
  const Outcome o = Invoke({"eval", "--policy", (run / "policy.json").string(), "--motions",
                         w.motions.string(), "--rollouts", "2"});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto j = nlohmann::json::parse(o.out);
  for (const char* k : {"policy", "seed", "rollouts", "sampler_steps", "mode", "motions", "aggregate"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
  ASSERT_EQ(j["motions"].size(), 2u);
  for (const char* k : {"mpjpe_mm", "dvel", "dacc", "success_rate", "joint_error", "reward", "episodes"}) {
    EXPECT_TRUE(j["aggregate"].contains(k)) << k;
    EXPECT_TRUE(j["motions"][0].contains(k)) << k;
  }
  EXPECT_EQ(j["motions"][0]["motion"], "fast");
  EXPECT_EQ(j["aggregate"]["episodes"], 4);
  const double s = j["aggregate"]["success_rate"];
  EXPECT_GE(s, 0.0);
  EXPECT_LE(s, 1.0);
}

TEST(Eval, ExpertSizedPolicyMismatchIsConfigError) {
  const Workspace w = MakeWorkspace("cli_eval_dims");
  const fs::path run = w.dir / "run";
  ASSERT_EQ(Invoke({"--quiet", "--out", run.string(), "train", "--motions", w.motions.string(),
                 "--cfg", w.train_cfg.string()}).code, 0);
  const Outcome o = Invoke({"--set", "env.history=3", "eval", "--policy",
                         (run / "policy.json").string(), "--motions", w.motions.string()});
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("obs_dim"), std::string::npos);
}

TEST(Eval, RandomPolicyFailsFastMotion) {
  const fs::path dir = ScratchDir("cli_eval_random");
  SaveMotion(Sinusoid(1.0, 2.0), dir / "fast.json");
  VelocityFieldConfig c;
  c.action_dim = 2;
  c.obs_dim = 41;
  c.hidden = {32, 32};
  Rng rng(4);
  SavePolicy(VelocityFieldNet::Random(c, rng), dir / "random.json");
  const Outcome o = Invoke({"--out", (dir / "eval.json").string(), "eval", "--policy",
                         (dir / "random.json").string(), "--motions", (dir / "fast.json").string()});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(o.out, "success rate: 0\n");
}

TEST(Refine, ZeroGenerationsKeepInitialResidual) {
  const Workspace w = MakeWorkspace("cli_refine");
  const fs::path run = w.dir / "run";
  ASSERT_EQ(Invoke({"--quiet", "--out", run.string(), "train", "--motions", w.motions.string(),
                 "--cfg", w.train_cfg.string()}).code, 0);
  const Outcome o = Invoke({"--out", (w.dir / "ref").string(), "--set", "refine.generations=0",
                         "refine", "--policy", (run / "policy.json").string(), "--motions",
                         w.motions.string(), "--cfg", w.refine_cfg.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  const ResidualPolicy r = LoadResidual(w.dir / "ref" / "residual.json");
  Rng init(kDefaultSeed ^ 0x5eedULL);
  const ResidualPolicy expect = ResidualPolicy::Create(13, 2, {8}, 0.5, init);
  EXPECT_EQ(r.net.params(), expect.net.params());
  EXPECT_EQ(ReadFile(w.dir / "ref" / "rewards.csv").substr(0, 38),
            "generation,best_reward,generation_best");
}

TEST(Refine, RewardColumnIsMonotone) {
  const Workspace w = MakeWorkspace("cli_refine_mono");
  const fs::path run = w.dir / "run";
  ASSERT_EQ(Invoke({"--quiet", "--out", run.string(), "train", "--motions", w.motions.string(),
                 "--cfg", w.train_cfg.string()}).code, 0);
  ASSERT_EQ(Invoke({"--quiet", "--out", (w.dir / "ref").string(), "--set", "refine.sigma=0.3",
                 "refine", "--policy", (run / "policy.json").string(), "--motions",
                 w.motions.string(), "--cfg", w.refine_cfg.string()}).code, 0);
  std::istringstream in(ReadFile(w.dir / "ref" / "rewards.csv"));
  std::string line;
  std::getline(in, line);
  double prev = -1e300;
  while (std::getline(in, line)) {
    const size_t a = line.find(',');
    const double best = std::stod(line.substr(a + 1, line.find(',', a + 1) - a - 1));
    EXPECT_GE(best, prev);
    prev = best;
  }
}

TEST(ExitCodes, UsageAndRuntime) {
  EXPECT_EQ(Invoke({}).code, 1);
  EXPECT_EQ(Invoke({"frobnicate"}).code, 1);
  EXPECT_EQ(Invoke({"--help"}).code, 0);
  EXPECT_EQ(Invoke({"actuator", "5020-16", "--v", "abc"}).code, 1);
  // A missing input file is a runtime failure.
  EXPECT_EQ(Invoke({"eval", "--policy", "/nonexistent/p.json", "--motions", "/nonexistent"}).code, 2);
}

TEST(Binary, RunsAsProcess) {
  const fs::path dir = ScratchDir("cli_binary");
  const std::string cmd = std::string(FLOWTRACK_CLI_PATH) +
                          " actuator 7520-22.5 --v 18.6 --tau 200 > " + (dir / "o.txt").string();
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(Field(ReadFile(dir / "o.txt"), "clipped"), "55.5");
  const std::string bad = std::string(FLOWTRACK_CLI_PATH) + " actuator nope 2> /dev/null";
  const int status = std::system(bad.c_str());
  EXPECT_EQ(WEXITSTATUS(status), 1);
}

}  // namespace
}  // namespace flowtrack
