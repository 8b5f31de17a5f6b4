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

// The `flowtrack` command-line tool.
//
//   flowtrack analyze  <motions>  [--h-air H]
//   flowtrack actuator <name>     [--v V] [--tau T] [--sweep]
//   flowtrack synth               --out clip.json [--amplitude ...]
//   flowtrack train    --motions M [--env E] [--cfg C] --out DIR
//   flowtrack eval     --policy P [--residual R] --motions M [--env E]
//   flowtrack refine   --policy P --motions M [--env E] [--cfg C] --out DIR
//
// Global flags: --seed (default kDefaultSeed), --quiet, --out and
// --set key=value, where key is a dot path into {"env": ..., "train": ...}
// for train, {"env": ..., "refine": ...} for refine and {"env": ...} for eval.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "flowtrack/actuation.hpp"
#include "flowtrack/common.hpp"
#include "flowtrack/distill.hpp"
#include "flowtrack/env.hpp"
#include "flowtrack/flow.hpp"
#include "flowtrack/metrics.hpp"
#include "flowtrack/motion.hpp"
#include "json.hpp"

namespace flowtrack {

inline constexpr std::uint64_t kDefaultSeed = 7;

namespace cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration files.

struct TrainConfig {
  DistillCfg distill;
  VelocityFieldConfig net;  // action_dim / obs_dim are filled from the env
  ExpertPolicy expert;      // motion is filled per clip
  int checkpoint_every = 0; // 0 disables intermediate checkpoints
};

struct RefineConfig {
  EsCfg es;
  std::vector<int> hidden = {32};
  double bound = 0.5;
  bool aggressive = true;
};

inline TrainConfig TrainConfigFromJson(const nlohmann::json& j) {
  using detail::ReadIf;
  TrainConfig c;
  c.net.hidden = {128, 128};
  try {
    detail::CheckKeys(j, {"iterations", "episodes_per_iteration", "gradient_steps", "batch_size",
                          "learning_rate", "sampler_steps", "accumulate", "checkpoint_every",
                          "hidden", "time_embed_dim", "beta_alpha", "beta_beta", "expert"},
                      "train config");
    ReadIf(j, "iterations", c.distill.iterations);
    ReadIf(j, "episodes_per_iteration", c.distill.episodes_per_iteration);
    ReadIf(j, "gradient_steps", c.distill.gradient_steps);
    ReadIf(j, "batch_size", c.distill.batch_size);
    ReadIf(j, "learning_rate", c.distill.learning_rate);
    ReadIf(j, "sampler_steps", c.distill.sampler_steps);
    ReadIf(j, "accumulate", c.distill.accumulate);
    ReadIf(j, "checkpoint_every", c.checkpoint_every);
    ReadIf(j, "hidden", c.net.hidden);
    ReadIf(j, "time_embed_dim", c.net.time_embed_dim);
    ReadIf(j, "beta_alpha", c.net.beta_alpha);
    ReadIf(j, "beta_beta", c.net.beta_beta);
    if (j.contains("expert")) {
      const auto& e = j.at("expert");
      detail::CheckKeys(e, {"lookahead", "velocity_ff", "gravity_ff", "friction_ff", "action_clip"},
                        "train config expert");
      ReadIf(e, "lookahead", c.expert.lookahead);
      ReadIf(e, "velocity_ff", c.expert.velocity_ff);
      ReadIf(e, "gravity_ff", c.expert.gravity_ff);
      ReadIf(e, "friction_ff", c.expert.friction_ff);
      ReadIf(e, "action_clip", c.expert.action_clip);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.distill.Validate();
  if (c.checkpoint_every < 0) throw ConfigError("train config: checkpoint_every must be >= 0");
  if (c.net.time_embed_dim < 2 || c.net.time_embed_dim % 2 != 0) {
    throw ConfigError("train config: time_embed_dim must be even and >= 2");
  }
  if (!(c.net.beta_alpha > 0.0) || !(c.net.beta_beta > 0.0)) {
    throw ConfigError("train config: Beta parameters must be positive");
  }
  for (int h : c.net.hidden) {
    if (h < 1) throw ConfigError("train config: hidden sizes must be positive");
  }
  if (c.expert.lookahead < 0 || !(c.expert.action_clip > 0.0)) {
    throw ConfigError("train config: expert lookahead >= 0 and action_clip > 0 required");
  }
  return c;
}

inline ojson TrainConfigToJson(const TrainConfig& c) {
  ojson j;
  j["iterations"] = c.distill.iterations;
  j["episodes_per_iteration"] = c.distill.episodes_per_iteration;
  j["gradient_steps"] = c.distill.gradient_steps;
  j["batch_size"] = c.distill.batch_size;
  j["learning_rate"] = c.distill.learning_rate;
  j["sampler_steps"] = c.distill.sampler_steps;
  j["accumulate"] = c.distill.accumulate;
  j["checkpoint_every"] = c.checkpoint_every;
  j["hidden"] = c.net.hidden;
  j["time_embed_dim"] = c.net.time_embed_dim;
  j["beta_alpha"] = c.net.beta_alpha;
  j["beta_beta"] = c.net.beta_beta;
  j["expert"] = {{"lookahead", c.expert.lookahead},
                 {"velocity_ff", c.expert.velocity_ff},
                 {"gravity_ff", c.expert.gravity_ff},
                 {"friction_ff", c.expert.friction_ff},
                 {"action_clip", c.expert.action_clip}};
  return j;
}

inline RefineConfig RefineConfigFromJson(const nlohmann::json& j) {
  using detail::ReadIf;
  RefineConfig c;
  try {
    detail::CheckKeys(j, {"population", "sigma", "generations", "episodes_per_eval",
                          "sampler_steps", "termination_penalty", "hidden", "bound", "mode"},
                      "refine config");
    ReadIf(j, "population", c.es.population);
    ReadIf(j, "sigma", c.es.sigma);
    ReadIf(j, "generations", c.es.generations);
    ReadIf(j, "episodes_per_eval", c.es.episodes_per_eval);
    ReadIf(j, "sampler_steps", c.es.sampler_steps);
    ReadIf(j, "termination_penalty", c.es.termination_penalty);
    ReadIf(j, "hidden", c.hidden);
    ReadIf(j, "bound", c.bound);
    if (j.contains("mode")) {
      const auto mode = j.at("mode").get<std::string>();
      if (mode != "base" && mode != "aggressive") {
        throw ConfigError("refine config: mode must be 'base' or 'aggressive'");
      }
      c.aggressive = mode == "aggressive";
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("refine config: ") + e.what());
  }
  c.es.Validate();
  if (!(c.bound >= 0.0)) throw ConfigError("refine config: bound must be >= 0");
  for (int h : c.hidden) {
    if (h < 1) throw ConfigError("refine config: hidden sizes must be positive");
  }
  return c;
}

inline ojson RefineConfigToJson(const RefineConfig& c) {
  ojson j;
  j["population"] = c.es.population;
  j["sigma"] = c.es.sigma;
  j["generations"] = c.es.generations;
  j["episodes_per_eval"] = c.es.episodes_per_eval;
  j["sampler_steps"] = c.es.sampler_steps;
  j["termination_penalty"] = c.es.termination_penalty;
  j["hidden"] = c.hidden;
  j["bound"] = c.bound;
  j["mode"] = c.aggressive ? "aggressive" : "base";
  return j;
}

inline nlohmann::json ReadJsonFile(const fs::path& path, const char* what) {
  try {
    return nlohmann::json::parse(ReadFile(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string(what) + ": '" + path.string() + "' is not valid JSON");
  }
}

// "a.b.0.c=value": value is parsed as JSON when possible, else taken as a
// string. Intermediate objects are created on demand.
inline void ApplyOverride(nlohmann::json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::string pointer;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw ConfigError("--set: empty path segment in '" + key + "'");
    pointer += "/" + part;
  }
  try {
    root[nlohmann::json::json_pointer(pointer)] = value;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("--set " + key + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Motion sets.

struct NamedClip {
  std::string name;
  MotionClip clip;
};

// A single file, or every *.json file of a directory sorted by filename.
inline std::vector<fs::path> MotionFiles(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("motions: '" + path.string() + "' does not exist");
  if (!fs::is_directory(path)) return {path};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(path)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  if (files.empty()) throw ConfigError("motions: no .json files in '" + path.string() + "'");
  return files;
}

inline std::vector<NamedClip> LoadMotionSet(const fs::path& path) {
  std::vector<NamedClip> out;
  for (const auto& f : MotionFiles(path)) out.push_back({f.stem().string(), LoadMotion(f)});
  return out;
}

// ---------------------------------------------------------------------------
// Output helpers.

inline double R6(double x) { return RoundSignificant(x, 6); }

inline ojson MetricsJson(const TrackingMetrics& m, double joint_error, double reward) {
  ojson j;
  j["mpjpe_mm"] = R6(m.mpjpe_mm);
  j["dvel"] = R6(m.dvel);
  j["dacc"] = R6(m.dacc);
  j["success_rate"] = R6(m.success_rate);
  j["joint_error"] = R6(joint_error);
  j["reward"] = R6(reward);
  j["episodes"] = m.episodes;
  return j;
}

inline void Emit(const std::string& text, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) {
    out << text;
  } else {
    WriteFileAtomic(out_path, text);
  }
}

// ---------------------------------------------------------------------------
// Subcommands.

struct Globals {
  std::uint64_t seed = kDefaultSeed;
  bool quiet = false;
  std::string out;
  std::vector<std::string> sets;
};

inline int CmdAnalyze(const Globals& g, const std::string& motions, double h_air,
                      std::ostream& out, std::ostream& err) {
  if (!g.sets.empty()) throw ConfigError("analyze: --set is not supported");
  const auto files = MotionFiles(motions);
  ojson report = ojson::array();
  int failures = 0;
  for (const auto& f : files) {
    ComplexityScores c;
    try {
      c = AnalyzeMotion(LoadMotion(f), h_air);
    } catch (const Error& e) {
      err << "warning: skipping " << f.filename().string() << ": " << e.what() << "\n";
      ++failures;
      continue;
    }
    ojson raw;
    raw["v_max"] = R6(c.v_max);
    raw["a_max"] = R6(c.a_max);
    raw["j_max"] = R6(c.j_max);
    raw["ang_max"] = R6(c.ang_max);
    raw["v_com_z_max"] = R6(c.v_com_z_max);
    raw["airborne"] = R6(c.airborne);
    raw["f_switch"] = R6(c.f_switch);
    ojson scores = ojson::array();
    for (double s : c.s) scores.push_back(R6(s));
    report.push_back({{"motion", f.stem().string()}, {"raw", raw}, {"scores", scores}});
  }
  if (failures == static_cast<int>(files.size())) {
    err << "error: no motion file could be analyzed\n";
    return 2;
  }
  Emit(report.dump(2) + "\n", g.out, out);
  return 0;
}

inline int CmdActuator(const Globals& g, const std::string& name, const std::string& catalog_path,
                       double v, double tau, bool sweep, int points, std::ostream& out) {
  const ActuatorCatalog cat =
      catalog_path.empty() ? DefaultActuatorCatalog() : LoadActuatorCatalog(catalog_path);
  const ActuatorParams& p = LookupActuator(cat, name);
  std::ostringstream s;
  if (!sweep) {
    const double clipped = ClipTorque(tau, v, p);
    const double applied = Actuate(tau, v, p);
    s << "actuator: " << name << "\n"
      << "v: " << FormatSignificant(v) << "\n"
      << "tau_cmd: " << FormatSignificant(tau) << "\n"
      << "limit: " << FormatSignificant(EnvelopeLimit(v, tau, p)) << "\n"
      << "clipped: " << FormatSignificant(clipped) << "\n"
      << "friction: " << FormatSignificant(FrictionTorque(v, p)) << "\n"
      << "applied: " << FormatSignificant(applied) << "\n"
      << "power: " << FormatSignificant(JointPower(applied, v)) << "\n";
  } else {
    if (points < 2) throw ConfigError("actuator: --points must be >= 2");
    // Grid over [0, 1.1 v_x2] in the direction of --v (positive by default).
    const double dir = v < 0.0 ? -1.0 : 1.0;
    s << "v,limit,clipped,friction,applied,power\n";
    for (int i = 0; i < points; ++i) {
      const double vi = dir * 1.1 * p.v_x2 * i / (points - 1);
      const double applied = Actuate(tau, vi, p);
      s << FormatSignificant(vi) << "," << FormatSignificant(EnvelopeLimit(vi, tau, p)) << ","
        << FormatSignificant(ClipTorque(tau, vi, p)) << ","
        << FormatSignificant(FrictionTorque(vi, p)) << "," << FormatSignificant(applied) << ","
        << FormatSignificant(JointPower(applied, vi)) << "\n";
    }
  }
  Emit(s.str(), g.out, out);
  return 0;
}

inline int CmdSynth(const Globals& g, SynthMotionSpec spec, std::ostream& out) {
  if (g.out.empty()) throw ConfigError("synth: --out is required");
  if (!g.sets.empty()) throw ConfigError("synth: --set is not supported");
  const int n = std::max(spec.n_joints, 0);
  if (spec.amplitude.empty()) spec.amplitude.assign(n, 0.3);
  if (spec.frequency.empty()) spec.frequency.assign(n, 0.25);
  if (spec.phase.empty()) spec.phase.assign(n, 0.0);
  MotionClip clip;
  try {
    clip = SynthMotion(spec);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  SaveMotion(clip, g.out);
  if (!g.quiet) out << "wrote " << clip.frames() << " frames to " << g.out << "\n";
  return 0;
}

// Merges {"<section>": cfg_file, "env": env_file} and applies --set.
inline nlohmann::json BuildConfig(const std::string& env_path, const std::string& cfg_path,
                                  const char* section, const std::vector<std::string>& sets) {
  nlohmann::json root;
  root["env"] = env_path.empty() ? nlohmann::json::object() : ReadJsonFile(env_path, "env config");
  root[section] = cfg_path.empty() ? nlohmann::json::object() : ReadJsonFile(cfg_path, section);
  for (const auto& s : sets) ApplyOverride(root, s);
  for (auto it = root.begin(); it != root.end(); ++it) {
    if (it.key() != "env" && it.key() != section) {
      throw ConfigError("--set: unknown top-level section '" + it.key() + "'");
    }
  }
  return root;
}

inline void CheckMotionsFitEnv(const std::vector<NamedClip>& motions, const ArmEnv& env) {
  for (const auto& m : motions) {
    if (m.clip.joints() != env.joints()) {
      throw ConfigError("motion '" + m.name + "' has " + std::to_string(m.clip.joints()) +
                        " joints, env has " + std::to_string(env.joints()));
    }
  }
}

inline int CmdTrain(const Globals& g, const std::string& env_path, const std::string& motions_path,
                    const std::string& cfg_path, std::ostream& out) {
  if (g.out.empty()) throw ConfigError("train: --out DIR is required");
  const nlohmann::json root = BuildConfig(env_path, cfg_path, "train", g.sets);
  const EnvConfig env_cfg = EnvConfigFromJson(root.at("env"));
  TrainConfig cfg = TrainConfigFromJson(root.at("train"));
  cfg.distill.seed = g.seed;
  const auto motions = LoadMotionSet(motions_path);
  ArmEnv env(env_cfg);
  CheckMotionsFitEnv(motions, env);

  std::vector<MotionClip> clips;
  std::vector<ExpertPolicy> experts;
  for (const auto& m : motions) {
    clips.push_back(m.clip);
    ExpertPolicy e = cfg.expert;
    e.motion = m.clip;
    experts.push_back(std::move(e));
  }
  cfg.net.action_dim = env.action_dim();
  cfg.net.obs_dim = env.obs_dim();
  Rng init_rng(g.seed ^ 0x5eedULL);
  VelocityFieldNet net = VelocityFieldNet::Random(cfg.net, init_rng);

  const fs::path dir(g.out);
  fs::create_directories(dir);
  ojson snapshot;
  snapshot["seed"] = g.seed;
  snapshot["motions"] = ojson::array();
  for (const auto& m : motions) snapshot["motions"].push_back(m.name);
  snapshot["env"] = EnvConfigToJson(env_cfg);
  snapshot["train"] = TrainConfigToJson(cfg);
  WriteFileAtomic(dir / "config.json", snapshot.dump(2) + "\n");

  std::string csv = "iteration,loss,buffer_size\n";
  const DistillResult result = DaggerTrain(
      env, experts, clips, net, cfg.distill,
      [&](const DistillIteration& it, const VelocityFieldNet& current) {
        csv += std::to_string(it.iteration) + "," + FormatSignificant(it.mean_loss) + "," +
               std::to_string(it.buffer_size) + "\n";
        if (!g.quiet) {
          out << "iteration " << it.iteration << " loss " << FormatSignificant(it.mean_loss)
              << " buffer " << it.buffer_size << "\n";
        }
        if (cfg.checkpoint_every > 0 && (it.iteration + 1) % cfg.checkpoint_every == 0) {
          fs::create_directories(dir / "checkpoints");
          std::ostringstream name;
          name << "policy_" << std::setw(5) << std::setfill('0') << it.iteration + 1 << ".json";
          SavePolicy(current, dir / "checkpoints" / name.str());
        }
      });
  WriteFileAtomic(dir / "history.csv", csv);
  SavePolicy(net, dir / "policy.json");
  if (result.history.empty()) {
    out << "final loss: n/a (0 iterations)\n";
  } else {
    out << "final loss: " << FormatSignificant(result.history.back().mean_loss) << "\n";
  }
  return 0;
}

inline VelocityFieldNet LoadPolicyFor(const std::string& path, const ArmEnv& env) {
  VelocityFieldNet net = LoadPolicy(path);
  if (net.obs_dim() != env.obs_dim() || net.action_dim() != env.action_dim()) {
    throw ConfigError("policy '" + path + "' expects obs_dim " + std::to_string(net.obs_dim()) +
                      " / action_dim " + std::to_string(net.action_dim()) + ", env provides " +
                      std::to_string(env.obs_dim()) + " / " + std::to_string(env.action_dim()));
  }
  return net;
}

inline int CmdEval(const Globals& g, const std::string& policy_path,
                   const std::string& residual_path, const std::string& env_path,
                   const std::string& motions_path, int rollouts, int sampler_steps,
                   const std::string& mode, std::ostream& out) {
  if (rollouts < 1) throw ConfigError("eval: --rollouts must be >= 1");
  if (sampler_steps < 1) throw ConfigError("eval: --steps must be >= 1");
  if (mode != "base" && mode != "aggressive") throw ConfigError("eval: --mode must be base or aggressive");
  const nlohmann::json root = BuildConfig(env_path, "", "eval", g.sets);
  if (!root.at("eval").empty()) throw ConfigError("eval: only env.* keys can be overridden");
  ArmEnv env(EnvConfigFromJson(root.at("env")));
  const VelocityFieldNet net = LoadPolicyFor(policy_path, env);
  std::optional<ResidualPolicy> residual;
  if (!residual_path.empty()) {
    residual = LoadResidual(residual_path);
    if (residual->net.input_dim() != ResidualInputDim(env) ||
        residual->net.output_dim() != env.action_dim()) {
      throw ConfigError("residual '" + residual_path + "' does not match the env dimensions");
    }
  }
  const auto motions = LoadMotionSet(motions_path);
  CheckMotionsFitEnv(motions, env);
  const EnvMode env_mode = mode == "aggressive" ? EnvMode::kAggressive : EnvMode::kBase;
  const PolicyFactory factory =
      FlowPolicyFactory(net, sampler_steps, residual ? &*residual : nullptr);

  ojson report;
  report["policy"] = fs::path(policy_path).filename().string();
  report["residual"] = residual_path.empty() ? ojson(nullptr)
                                             : ojson(fs::path(residual_path).filename().string());
  report["seed"] = g.seed;
  report["rollouts"] = rollouts;
  report["sampler_steps"] = sampler_steps;
  report["mode"] = mode;
  report["motions"] = ojson::array();
  std::vector<double> mpjpe, dvel, dacc, succ, jerr, rew;
  int episodes = 0;
  for (size_t i = 0; i < motions.size(); ++i) {
    const auto clips = SegmentClips(motions[i].clip);
    const EvalReport r = EvaluatePolicy(env, clips, factory, rollouts, g.seed + i, env_mode);
    ojson m = MetricsJson(r.aggregate, r.mean_joint_error, r.mean_reward);
    m["motion"] = motions[i].name;
    m["clips"] = static_cast<int>(clips.size());
    report["motions"].push_back(m);
    mpjpe.push_back(r.aggregate.mpjpe_mm);
    dvel.push_back(r.aggregate.dvel);
    dacc.push_back(r.aggregate.dacc);
    succ.push_back(r.aggregate.success_rate);
    jerr.push_back(r.mean_joint_error);
    rew.push_back(r.mean_reward);
    episodes += r.aggregate.episodes;
  }
  TrackingMetrics agg{MeanOfEpisodeMeans(mpjpe), MeanOfEpisodeMeans(dvel),
                      MeanOfEpisodeMeans(dacc), MeanOfEpisodeMeans(succ), episodes};
  report["aggregate"] = MetricsJson(agg, MeanOfEpisodeMeans(jerr), MeanOfEpisodeMeans(rew));
  const std::string text = report.dump(2) + "\n";
  if (g.out.empty()) {
    out << text;
  } else {
    WriteFileAtomic(g.out, text);
    out << "success rate: " << FormatSignificant(agg.success_rate) << "\n";
  }
  return 0;
}

inline int CmdRefine(const Globals& g, const std::string& policy_path, const std::string& env_path,
                     const std::string& motions_path, const std::string& cfg_path,
                     std::ostream& out) {
  if (g.out.empty()) throw ConfigError("refine: --out DIR is required");
  const nlohmann::json root = BuildConfig(env_path, cfg_path, "refine", g.sets);
  const EnvConfig env_cfg = EnvConfigFromJson(root.at("env"));
  RefineConfig cfg = RefineConfigFromJson(root.at("refine"));
  cfg.es.seed = g.seed;
  ArmEnv env(env_cfg);
  const VelocityFieldNet base = LoadPolicyFor(policy_path, env);
  const auto motions = LoadMotionSet(motions_path);
  CheckMotionsFitEnv(motions, env);
  std::vector<MotionClip> clips;
  for (const auto& m : motions) clips.push_back(m.clip);

  Rng init_rng(g.seed ^ 0x5eedULL);
  ResidualPolicy residual =
      ResidualPolicy::Create(ResidualInputDim(env), env.action_dim(), cfg.hidden, cfg.bound, init_rng);
  const RefineResult result =
      EsRefine(base, residual, env, clips, cfg.es,
               cfg.aggressive ? EnvMode::kAggressive : EnvMode::kBase);

  const fs::path dir(g.out);
  fs::create_directories(dir);
  ojson snapshot;
  snapshot["seed"] = g.seed;
  snapshot["policy"] = fs::path(policy_path).filename().string();
  snapshot["motions"] = ojson::array();
  for (const auto& m : motions) snapshot["motions"].push_back(m.name);
  snapshot["env"] = EnvConfigToJson(env_cfg);
  snapshot["refine"] = RefineConfigToJson(cfg);
  WriteFileAtomic(dir / "config.json", snapshot.dump(2) + "\n");

  std::string csv = "generation,best_reward,generation_best\n";
  for (size_t i = 0; i < result.best_reward.size(); ++i) {
    csv += std::to_string(i) + "," + FormatSignificant(result.best_reward[i]) + ",";
    csv += i == 0 ? "" : FormatSignificant(result.generation_best[i - 1]);
    csv += "\n";
  }
  WriteFileAtomic(dir / "rewards.csv", csv);
  SaveResidual(residual, dir / "residual.json");
  if (!g.quiet) {
    out << "initial reward: " << FormatSignificant(result.best_reward.front()) << "\n";
  }
  out << "best reward: " << FormatSignificant(result.best_reward.back()) << "\n";
  return 0;
}

}  // namespace cli

// Entry point shared by the binary and the tests.
inline int RunCli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Flow-matching motion tracking toolkit", "flowtrack"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  cli::Globals g;
  app.add_option("--seed", g.seed, "random seed (default 7)");
  app.add_flag("--quiet", g.quiet, "suppress progress output");
  app.add_option("--out", g.out, "output file or directory");
  app.add_option("--set", g.sets, "config override key=value (dot path)")->take_all();

  std::string motions, env_path, cfg_path, policy, residual, name, catalog, mode = "base";
  double h_air = 0.05, v = 0.0, tau = 0.0;
  bool sweep = false;
  int points = 101, rollouts = 10, steps = 5;
  SynthMotionSpec synth;

  auto* analyze = app.add_subcommand("analyze", "motion complexity report");
  analyze->add_option("motions", motions, "motion file or directory")->required();
  analyze->add_option("--h-air", h_air, "airborne height threshold (m)");

  auto* actuator = app.add_subcommand("actuator", "inspect an actuator model");
  actuator->add_option("name", name, "catalog entry, e.g. 7520-22.5")->required();
  actuator->add_option("--v", v, "joint speed (rad/s)");
  actuator->add_option("--tau", tau, "commanded torque (N m)");
  actuator->add_flag("--sweep", sweep, "CSV over a speed grid");
  actuator->add_option("--points", points, "sweep grid size");
  actuator->add_option("--catalog", catalog, "actuator catalog JSON");

  auto* synth_cmd = app.add_subcommand("synth", "write a sinusoidal reference clip");
  synth_cmd->add_option("--joints", synth.n_joints, "joint count");
  synth_cmd->add_option("--duration", synth.duration, "seconds");
  synth_cmd->add_option("--fps", synth.fps, "frames per second");
  synth_cmd->add_option("--amplitude", synth.amplitude, "rad per joint (default 0.3)");
  synth_cmd->add_option("--frequency", synth.frequency, "Hz per joint (default 0.25)");
  synth_cmd->add_option("--phase", synth.phase, "rad per joint (default 0)");
  synth_cmd->add_option("--link-lengths", synth.link_lengths, "m per link");

  auto* train = app.add_subcommand("train", "DAgger distillation into a flow policy");
  train->add_option("--motions", motions, "motion file or directory")->required();
  train->add_option("--env", env_path, "env config JSON");
  train->add_option("--cfg", cfg_path, "train config JSON");

  auto* eval = app.add_subcommand("eval", "closed-loop tracking metrics");
  eval->add_option("--policy", policy, "flow policy checkpoint")->required();
  eval->add_option("--residual", residual, "residual checkpoint");
  eval->add_option("--motions", motions, "motion file or directory")->required();
  eval->add_option("--env", env_path, "env config JSON");
  eval->add_option("--rollouts", rollouts, "rollouts per clip");
  eval->add_option("--steps", steps, "ODE integration steps");
  eval->add_option("--mode", mode, "base or aggressive");

  auto* refine = app.add_subcommand("refine", "evolution-strategy residual refinement");
  refine->add_option("--policy", policy, "flow policy checkpoint")->required();
  refine->add_option("--motions", motions, "motion file or directory")->required();
  refine->add_option("--env", env_path, "env config JSON");
  refine->add_option("--cfg", cfg_path, "refine config JSON");

  try {
    std::vector<std::string> args;
    for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*analyze) return cli::CmdAnalyze(g, motions, h_air, out, err);
    if (*actuator) return cli::CmdActuator(g, name, catalog, v, tau, sweep, points, out);
    if (*synth_cmd) return cli::CmdSynth(g, synth, out);
    if (*train) return cli::CmdTrain(g, env_path, motions, cfg_path, out);
    if (*eval) return cli::CmdEval(g, policy, residual, env_path, motions, rollouts, steps, mode, out);
    if (*refine) return cli::CmdRefine(g, policy, env_path, motions, cfg_path, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace flowtrack
