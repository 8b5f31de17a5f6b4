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

// Two-stage policy learning on the toy arm:
//
//  1. DAgger distillation. Each iteration clears the replay buffer, rolls out
//     the current flow policy, labels every visited state with the matching
//     expert's action and fits the velocity field with the flow-matching
//     loss.
//  2. Residual refinement. A small residual network is added on top of the
//     frozen flow policy and tuned with an elitist (1 + lambda) evolution
//     strategy under aggressive randomization.
//
// Plus rollout logging and the clip-level evaluation protocol.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowtrack/common.hpp"
#include "flowtrack/env.hpp"
#include "flowtrack/flow.hpp"
#include "flowtrack/metrics.hpp"
#include "flowtrack/motion.hpp"
#include "json.hpp"

namespace flowtrack {

// ---------------------------------------------------------------------------
// Rollouts.

struct Action {
  Eigen::VectorXd applied;
  // Reported back as "previous action" in the next observation.
  Eigen::VectorXd reported;
};

inline Action PlainAction(Eigen::VectorXd a) { return {a, a}; }

using Policy = std::function<Action(const ArmEnv&, const Eigen::VectorXd& obs)>;
// Builds a fresh policy for one episode; `motion_index` selects the clip.
using PolicyFactory = std::function<Policy(std::uint64_t episode_seed, int motion_index)>;

struct EpisodeLog {
  Trajectory rob_pos, rob_vel, ref_pos, ref_vel;  // one entry per step taken
  std::vector<TrackingErrors> errors;
  std::vector<double> rewards;
  std::vector<double> joint_errors;
  int steps = 0;
  int horizon = 0;
  bool terminated_early = false;
  bool numerical_blowup = false;

  double MeanJointError() const {
    if (joint_errors.empty()) return 0.0;
    double acc = 0.0;
    for (double e : joint_errors) acc += e;
    return acc / joint_errors.size();
  }
  double TotalReward() const {
    double acc = 0.0;
    for (double r : rewards) acc += r;
    return acc;
  }
};

using StateCallback = std::function<void(const ArmEnv&, const Eigen::VectorXd& obs)>;

inline EpisodeLog RunEpisode(ArmEnv& env, const MotionClip& motion, std::uint64_t seed,
                             EnvMode mode, const Policy& policy,
                             const StateCallback& on_state = nullptr) {
  EpisodeLog log;
  Eigen::VectorXd obs = env.Reset(motion, seed, mode);
  log.horizon = env.horizon();
  while (!env.done()) {
    if (on_state) on_state(env, obs);
    const Action a = policy(env, obs);
    StepResult r = env.Step(a.applied, a.reported);
    ++log.steps;
    log.rewards.push_back(r.reward);
    if (r.info.numerical_blowup) {
      log.numerical_blowup = true;
      log.terminated_early = true;
      break;
    }
    log.rob_pos.push_back(env.BodyPositions());
    log.rob_vel.push_back(env.BodyVelocities());
    log.ref_pos.push_back(env.ReferenceBodyPositions(env.step_count()));
    log.ref_vel.push_back(env.ReferenceBodyVelocities(env.step_count()));
    log.errors.push_back(r.info.errors);
    log.joint_errors.push_back(r.info.joint_error);
    log.terminated_early = r.info.terminated;
    obs = std::move(r.observation);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Residual policy.

struct ResidualPolicy {
  Mlp net;
  double bound = 0.5;

  // Output layer starts at zero so the initial residual is exactly zero.
  static ResidualPolicy Create(int input_dim, int action_dim, std::vector<int> hidden,
                               double bound, Rng& rng) {
    std::vector<int> sizes{input_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(action_dim);
    ResidualPolicy r{Mlp::Glorot(sizes, rng), bound};
    r.net.weight(r.net.layers() - 1).setZero();
    r.net.bias(r.net.layers() - 1).setZero();
    return r;
  }

  Eigen::VectorXd Act(const Eigen::VectorXd& input) const {
    return net.Forward(input).col(0);
  }
};

// a = a_flow + clamp(a_res, -bound, bound).
inline Eigen::VectorXd ResidualCompose(const Eigen::VectorXd& a_flow,
                                       const Eigen::VectorXd& a_res, double bound) {
  if (a_flow.size() != a_res.size()) throw DimensionError("residual compose: dimension mismatch");
  if (!(bound >= 0.0)) throw ArgumentError("residual compose: bound must be >= 0");
  return a_flow + a_res.cwiseMax(-bound).cwiseMin(bound);
}

// [q - q0, qdot, previous refined action, command, a_flow].
inline Eigen::VectorXd ResidualInput(const ArmEnv& env, const Eigen::VectorXd& a_flow) {
  const int n = env.joints();
  Eigen::VectorXd in(3 * n + env.command_dim() + n);
  in << env.q() - env.DefaultQ(), env.qdot(), env.prev_action(), env.Command(), a_flow;
  return in;
}

inline int ResidualInputDim(const ArmEnv& env) { return 4 * env.joints() + env.command_dim(); }

inline void SaveResidual(const ResidualPolicy& r, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format"] = "flowtrack.residual";
  j["version"] = kCheckpointVersion;
  j["bound"] = r.bound;
  const auto body = MlpToJson(r.net);
  for (const auto& [k, v] : body.items()) j[k] = v;
  WriteFileAtomic(path, j.dump() + "\n");
}

inline ResidualPolicy LoadResidual(const std::filesystem::path& path) {
  try {
    const auto j = nlohmann::json::parse(ReadFile(path));
    if (j.at("format").get<std::string>() != "flowtrack.residual") {
      throw CheckpointError("checkpoint: not a residual checkpoint");
    }
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw CheckpointError("checkpoint: unsupported version");
    }
    return {MlpFromJson(j), j.at("bound").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Policy factories.

inline PolicyFactory FlowPolicyFactory(const VelocityFieldNet& net, int sampler_steps,
                                       const ResidualPolicy* residual = nullptr) {
  return [&net, sampler_steps, residual](std::uint64_t seed, int) -> Policy {
    return [&net, sampler_steps, residual, rng = Rng(seed)](
               const ArmEnv& env, const Eigen::VectorXd& obs) mutable -> Action {
      Eigen::VectorXd a_flow = EulerSample(net, obs, sampler_steps, rng);
      if (!residual) return PlainAction(std::move(a_flow));
      const Eigen::VectorXd a_res = residual->Act(ResidualInput(env, a_flow));
      return {ResidualCompose(a_flow, a_res, residual->bound), a_flow};
    };
  };
}

inline PolicyFactory ExpertPolicyFactory(const std::vector<ExpertPolicy>& experts) {
  return [&experts](std::uint64_t, int motion_index) -> Policy {
    const ExpertPolicy& e = experts.at(motion_index);
    return [&e](const ArmEnv& env, const Eigen::VectorXd&) {
      return PlainAction(ExpertAction(e, env));
    };
  };
}

// ---------------------------------------------------------------------------
// DAgger distillation.

struct ReplayRecord {
  Eigen::VectorXd observation;
  int motion_id = 0;
  Eigen::VectorXd expert_action;
};

class ReplayBuffer {
 public:
  void Clear() { records_.clear(); }
  void Add(ReplayRecord r) { records_.push_back(std::move(r)); }
  size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<ReplayRecord>& records() const { return records_; }

  FmBatch Gather(const std::vector<size_t>& idx) const {
    const auto& first = records_.at(idx.front());
    FmBatch b{Eigen::MatrixXd(idx.size(), first.observation.size()),
              Eigen::MatrixXd(idx.size(), first.expert_action.size())};
    for (size_t i = 0; i < idx.size(); ++i) {
      b.observations.row(i) = records_[idx[i]].observation.transpose();
      b.expert_actions.row(i) = records_[idx[i]].expert_action.transpose();
    }
    return b;
  }

 private:
  std::vector<ReplayRecord> records_;
};

struct DistillCfg {
  int iterations = 30;
  int episodes_per_iteration = 2;
  int gradient_steps = 400;
  int batch_size = 256;
  double learning_rate = 1e-3;
  int sampler_steps = 5;
  std::uint64_t seed = 7;
  // Keep records across iterations (classical DAgger) instead of clearing.
  bool accumulate = false;

  void Validate() const {
    if (iterations < 0 || episodes_per_iteration < 1 || gradient_steps < 1 ||
        batch_size < 1 || !(learning_rate > 0.0) || sampler_steps < 1) {
      throw ConfigError("distill: iterations >= 0 and positive episode/step/batch/lr settings required");
    }
  }
};

struct DistillIteration {
  int iteration = 0;
  double mean_loss = 0.0;
  size_t buffer_size = 0;
};

struct DistillResult {
  std::vector<DistillIteration> history;
};

using IterationCallback = std::function<void(const DistillIteration&, const VelocityFieldNet&)>;

inline DistillResult DaggerTrain(ArmEnv& env, const std::vector<ExpertPolicy>& experts,
                                 const std::vector<MotionClip>& motions, VelocityFieldNet& net,
                                 const DistillCfg& cfg,
                                 const IterationCallback& on_iteration = nullptr) {
  cfg.Validate();
  if (motions.empty()) throw ConfigError("distill: no motions");
  if (experts.size() != motions.size()) {
    throw ConfigError("distill: expected one expert per motion (" +
                      std::to_string(motions.size()) + " motions, " +
                      std::to_string(experts.size()) + " experts)");
  }
  if (net.obs_dim() != env.obs_dim() || net.action_dim() != env.action_dim()) {
    throw ConfigError("distill: policy dimensions do not match the environment");
  }
  for (const auto& m : motions) {
    if (m.joints() != env.joints()) throw ConfigError("distill: motion joint count mismatch");
  }

  Rng rng(cfg.seed);
  std::uniform_int_distribution<int> pick_motion(0, static_cast<int>(motions.size()) - 1);
  const PolicyFactory student = FlowPolicyFactory(net, cfg.sampler_steps);
  ReplayBuffer buffer;
  AdamState adam;
  const AdamCfg adam_cfg{cfg.learning_rate};
  DistillResult result;

  for (int it = 0; it < cfg.iterations; ++it) {
    if (!cfg.accumulate) buffer.Clear();
    for (int e = 0; e < cfg.episodes_per_iteration; ++e) {
      const int m = pick_motion(rng);
      const std::uint64_t env_seed = rng();
      const std::uint64_t sample_seed = rng();
      RunEpisode(env, motions[m], env_seed, EnvMode::kBase, student(sample_seed, m),
                 [&](const ArmEnv& s, const Eigen::VectorXd& obs) {
                   buffer.Add({obs, m, ExpertAction(experts[m], s)});
                 });
    }

    std::uniform_int_distribution<size_t> pick(0, buffer.size() - 1);
    std::vector<size_t> idx(cfg.batch_size);
    double loss_acc = 0.0;
    for (int g = 0; g < cfg.gradient_steps; ++g) {
      for (auto& i : idx) i = pick(rng);
      const FmLossResult r = FmLossAndGrad(net, buffer.Gather(idx), rng);
      AdamStep(net.mlp().params(), r.grad, adam, adam_cfg);
      loss_acc += r.loss;
    }
    DistillIteration rec{it, loss_acc / cfg.gradient_steps, buffer.size()};
    result.history.push_back(rec);
    if (on_iteration) on_iteration(rec, net);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct ClipEvaluation {
  TrackingMetrics metrics;
  double mean_joint_error = 0.0;  // rad, per-episode means averaged
  double mean_reward = 0.0;       // per-episode total reward averaged
  std::vector<EpisodeOutcome> outcomes;
};

struct EvalReport {
  std::vector<ClipEvaluation> clips;
  TrackingMetrics aggregate;
  double mean_joint_error = 0.0;
  double mean_reward = 0.0;
};

// Every clip is rolled out n_rollouts times. Tracking errors are
// averaged over control steps within an episode, then over episodes, then
// over clips. dacc skips episodes shorter than two steps.
inline EvalReport EvaluatePolicy(ArmEnv& env, const std::vector<MotionClip>& clips,
                                 const PolicyFactory& factory, int n_rollouts,
                                 std::uint64_t seed, EnvMode mode = EnvMode::kBase) {
  if (clips.empty()) throw ArgumentError("evaluate: no clips");
  if (n_rollouts < 1) throw ArgumentError("evaluate: n_rollouts must be >= 1");
  Rng rng(seed);
  EvalReport report;
  std::vector<double> clip_mpjpe, clip_dvel, clip_dacc, clip_succ, clip_err, clip_rew;
  for (size_t c = 0; c < clips.size(); ++c) {
    ClipEvaluation ce;
    std::vector<double> mpjpe, dvel, dacc, err, rew;
    for (int r = 0; r < n_rollouts; ++r) {
      const std::uint64_t env_seed = rng();
      const std::uint64_t policy_seed = rng();
      const EpisodeLog log = RunEpisode(env, clips[c], env_seed, mode,
                                        factory(policy_seed, static_cast<int>(c)));
      ce.outcomes.push_back({log.terminated_early});
      err.push_back(log.MeanJointError());
      rew.push_back(log.TotalReward());
      if (log.rob_pos.empty()) continue;
      mpjpe.push_back(Mpjpe(log.ref_pos, log.rob_pos));
      dvel.push_back(DeltaVel(log.ref_vel, log.rob_vel, env.dt()));
      if (log.rob_vel.size() >= 2) dacc.push_back(DeltaAcc(log.ref_vel, log.rob_vel, env.dt()));
    }
    auto mean_or_nan = [](const std::vector<double>& v) {
      return v.empty() ? std::nan("") : MeanOfEpisodeMeans(v);
    };
    ce.metrics.mpjpe_mm = mean_or_nan(mpjpe);
    ce.metrics.dvel = mean_or_nan(dvel);
    ce.metrics.dacc = mean_or_nan(dacc);
    ce.metrics.success_rate = SuccessRate(ce.outcomes);
    ce.metrics.episodes = n_rollouts;
    ce.mean_joint_error = MeanOfEpisodeMeans(err);
    ce.mean_reward = MeanOfEpisodeMeans(rew);
    clip_mpjpe.push_back(ce.metrics.mpjpe_mm);
    clip_dvel.push_back(ce.metrics.dvel);
    clip_dacc.push_back(ce.metrics.dacc);
    clip_succ.push_back(ce.metrics.success_rate);
    clip_err.push_back(ce.mean_joint_error);
    clip_rew.push_back(ce.mean_reward);
    report.clips.push_back(std::move(ce));
  }
  report.aggregate.mpjpe_mm = MeanOfEpisodeMeans(clip_mpjpe);
  report.aggregate.dvel = MeanOfEpisodeMeans(clip_dvel);
  report.aggregate.dacc = MeanOfEpisodeMeans(clip_dacc);
  report.aggregate.success_rate = MeanOfEpisodeMeans(clip_succ);
  report.aggregate.episodes = static_cast<int>(clips.size()) * n_rollouts;
  report.mean_joint_error = MeanOfEpisodeMeans(clip_err);
  report.mean_reward = MeanOfEpisodeMeans(clip_rew);
  return report;
}

// ---------------------------------------------------------------------------
// Residual refinement with a (1 + lambda) evolution strategy.

struct EsCfg {
  int population = 8;  // lambda
  double sigma = 0.02;
  int generations = 30;
  int episodes_per_eval = 3;
  int sampler_steps = 5;
  std::uint64_t seed = 11;
  // Charged once when an episode ends on a threshold violation.
  double termination_penalty = 1.0;

  void Validate() const {
    if (population < 0 || generations < 0 || episodes_per_eval < 1 || sampler_steps < 1 ||
        !(sigma >= 0.0) || !(termination_penalty >= 0.0)) {
      throw ConfigError("refine: invalid evolution strategy settings");
    }
  }
};

// Mean per-step reward over the full horizon (missing steps count as zero),
// minus the termination penalty for early-terminated episodes.
inline double EpisodeScore(const EpisodeLog& log, double termination_penalty) {
  const double per_step = log.TotalReward() / std::max(1, log.horizon);
  return per_step - (log.terminated_early ? termination_penalty : 0.0);
}

// Mean EpisodeScore of base + residual over a fixed set of episodes; the same
// seeds are reused for every candidate.
inline double ScoreResidual(ArmEnv& env, const VelocityFieldNet& base,
                            const ResidualPolicy& residual,
                            const std::vector<MotionClip>& motions,
                            const std::vector<std::uint64_t>& seeds, int sampler_steps,
                            double termination_penalty, EnvMode mode) {
  const PolicyFactory factory = FlowPolicyFactory(base, sampler_steps, &residual);
  double acc = 0.0;
  for (size_t e = 0; e < seeds.size(); ++e) {
    const int m = static_cast<int>(e % motions.size());
    const EpisodeLog log = RunEpisode(env, motions[m], seeds[e], mode,
                                      factory(seeds[e] ^ 0x9e3779b97f4a7c15ULL, m));
    acc += EpisodeScore(log, termination_penalty);
  }
  return acc / seeds.size();
}

struct RefineResult {
  // best_reward[g] is the best fitness after generation g (entry 0 is the
  // initial residual); non-decreasing by construction.
  std::vector<double> best_reward;
  std::vector<double> generation_best;  // best offspring of each generation
};

inline RefineResult EsRefine(const VelocityFieldNet& base, ResidualPolicy& residual,
                             ArmEnv& env, const std::vector<MotionClip>& motions,
                             const EsCfg& cfg, EnvMode mode = EnvMode::kAggressive) {
  cfg.Validate();
  if (motions.empty()) throw ConfigError("refine: no motions");
  if (residual.net.input_dim() != ResidualInputDim(env) ||
      residual.net.output_dim() != env.action_dim()) {
    throw ConfigError("refine: residual dimensions do not match the environment");
  }
  if (base.obs_dim() != env.obs_dim() || base.action_dim() != env.action_dim()) {
    throw ConfigError("refine: base policy dimensions do not match the environment");
  }
  Rng rng(cfg.seed);
  std::vector<std::uint64_t> seeds(cfg.episodes_per_eval);
  for (auto& s : seeds) s = rng();

  auto fitness = [&](const ResidualPolicy& r) {
    return ScoreResidual(env, base, r, motions, seeds, cfg.sampler_steps,
                         cfg.termination_penalty, mode);
  };

  RefineResult out;
  double parent_fitness = fitness(residual);
  out.best_reward.push_back(parent_fitness);
  std::normal_distribution<double> normal;
  ResidualPolicy candidate = residual;
  for (int g = 0; g < cfg.generations; ++g) {
    double gen_best = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd gen_best_params;
    for (int i = 0; i < cfg.population; ++i) {
      candidate.net.params() = residual.net.params();
      for (Eigen::Index k = 0; k < candidate.net.param_count(); ++k) {
        candidate.net.params()[k] += cfg.sigma * normal(rng);
      }
      const double f = fitness(candidate);
      if (f > gen_best) {
        gen_best = f;
        gen_best_params = candidate.net.params();
      }
    }
    if (cfg.population > 0 && gen_best > parent_fitness) {
      residual.net.params() = gen_best_params;
      parent_fitness = gen_best;
    }
    out.generation_best.push_back(gen_best);
    out.best_reward.push_back(parent_fitness);
  }
  return out;
}

}  // namespace flowtrack
