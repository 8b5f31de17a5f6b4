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

// Toy torque-controlled planar arm. A control step runs
//
//   action -> PD setpoint -> torque -> envelope clip -> friction -> dynamics
//
// at 50 Hz, with the PD loop re-evaluated on every physics substep. Links are
// point masses at their distal tips; each joint also carries its motor's
// armature inertia.
//
// Observation layout (dims for N joints, history H):
//   p  [0, 3N)            q - q0, qdot, previous action
//   c  [3N, 5N + 1)       reference q and qdot for the next frame,
//                         end-effector direction error (torso-orientation proxy)
//   h  [5N + 1, ...)      H previous p vectors, most recent first; at reset
//                         every slot holds the initial p

#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowtrack/actuation.hpp"
#include "flowtrack/common.hpp"
#include "flowtrack/kinematics.hpp"
#include "flowtrack/metrics.hpp"
#include "flowtrack/motion.hpp"
#include "json.hpp"

namespace flowtrack {

struct LinkParams {
  double mass = 0.5;    // kg
  double length = 0.25; // m
};

// Uniform ranges, all symmetric about zero (scales are relative).
struct RandomizationCfg {
  double pose_noise = 0.05;      // rad
  double disturbance = 0.5;      // N m, redrawn every control step
  double mass_scale = 0.10;
  double friction_scale = 0.20;
  double default_offset = 0.01;  // rad, offset of the true PD default pose
  double aggressive_factor = 1.5;

  RandomizationCfg Scaled(double f) const {
    RandomizationCfg r = *this;
    r.pose_noise *= f;
    r.disturbance *= f;
    r.mass_scale *= f;
    r.friction_scale *= f;
    r.default_offset *= f;
    return r;
  }
};

struct EnvConfig {
  std::vector<LinkParams> links = {{0.5, 0.25}, {0.3, 0.2}};
  std::vector<std::string> actuators = {"5020-16", "4010-25"};
  ActuatorCatalog catalog = DefaultActuatorCatalog();
  double gravity = 9.81;
  double base_height = 1.0;
  double pd_frequency = 10.0;  // Hz
  double pd_damping = 2.0;
  std::vector<double> tau_max;    // per joint; empty -> tau_y1 of the actuator
  std::vector<double> default_q;  // per joint; empty -> zeros
  // Multiplies both torque ceilings of every actuator (1 = catalog values).
  double envelope_scale = 1.0;
  double dt = 0.02;
  int substeps = 4;
  int episode_len = 500;
  int history = 5;
  RandomizationCfg randomization;
  TerminationThresholds thresholds;
  PowerPenaltyCfg power_penalty{150.0, 500.0, -10.0, {0, 1}};

  int joints() const { return static_cast<int>(links.size()); }

  void Validate() const {
    const int n = joints();
    if (n < 1) throw ConfigError("env: at least one link required");
    for (const auto& l : links) {
      if (!(l.mass > 0.0) || !(l.length > 0.0)) throw ConfigError("env: link mass and length must be positive");
    }
    if (static_cast<int>(actuators.size()) != n) throw ConfigError("env: one actuator per joint required");
    for (const auto& a : actuators) LookupActuator(catalog, a).Validate();
    if (!tau_max.empty() && static_cast<int>(tau_max.size()) != n) throw ConfigError("env: tau_max needs one entry per joint");
    if (!default_q.empty() && static_cast<int>(default_q.size()) != n) throw ConfigError("env: default_q needs one entry per joint");
    if (!(dt > 0.0) || substeps < 1) throw ConfigError("env: dt must be positive and substeps >= 1");
    if (episode_len < 1 || history < 0) throw ConfigError("env: episode_len >= 1 and history >= 0 required");
    if (!(envelope_scale > 0.0)) throw ConfigError("env: envelope_scale must be positive");
    if (!(gravity >= 0.0)) throw ConfigError("env: gravity must be non-negative");
    const auto& r = randomization;
    if (r.pose_noise < 0 || r.disturbance < 0 || r.mass_scale < 0 || r.mass_scale >= 1 ||
        r.friction_scale < 0 || r.friction_scale >= 1 || r.default_offset < 0 ||
        !(r.aggressive_factor >= 1.0)) {
      throw ConfigError("env: invalid randomization ranges");
    }
    try {
      thresholds.Validate();
      power_penalty.Validate();
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("env: ") + e.what());
    }
    for (int j : power_penalty.joints) {
      if (j < 0 || j >= n) throw ConfigError("env: power penalty joint out of range");
    }
  }
};

namespace detail {

template <typename T>
void ReadIf(const nlohmann::json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it != j.end()) out = it->get<T>();
}

inline void CheckKeys(const nlohmann::json& j, std::initializer_list<const char*> keys,
                      const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace detail

// Missing keys keep their defaults; unknown keys are rejected.
inline EnvConfig EnvConfigFromJson(const nlohmann::json& j) {
  using detail::ReadIf;
  EnvConfig c;
  try {
    detail::CheckKeys(j, {"links", "actuators", "actuator_catalog", "gravity", "base_height",
                          "pd", "envelope_scale", "dt", "substeps", "episode_len",
                          "history", "randomization", "thresholds", "power_penalty"},
                      "env config");
    if (j.contains("links")) {
      c.links.clear();
      for (const auto& l : j.at("links")) {
        detail::CheckKeys(l, {"mass", "length"}, "env config links");
        c.links.push_back({l.at("mass").get<double>(), l.at("length").get<double>()});
      }
    }
    ReadIf(j, "actuators", c.actuators);
    if (j.contains("actuator_catalog")) {
      c.catalog = ActuatorCatalogFromJson(j.at("actuator_catalog"));
    }
    ReadIf(j, "gravity", c.gravity);
    ReadIf(j, "base_height", c.base_height);
    if (j.contains("pd")) {
      const auto& pd = j.at("pd");
      detail::CheckKeys(pd, {"frequency_hz", "damping_ratio", "tau_max", "default_q"}, "env config pd");
      ReadIf(pd, "frequency_hz", c.pd_frequency);
      ReadIf(pd, "damping_ratio", c.pd_damping);
      ReadIf(pd, "tau_max", c.tau_max);
      ReadIf(pd, "default_q", c.default_q);
    }
    ReadIf(j, "envelope_scale", c.envelope_scale);
    ReadIf(j, "dt", c.dt);
    ReadIf(j, "substeps", c.substeps);
    ReadIf(j, "episode_len", c.episode_len);
    ReadIf(j, "history", c.history);
    if (j.contains("randomization")) {
      const auto& r = j.at("randomization");
      detail::CheckKeys(r, {"pose_noise", "disturbance", "mass_scale", "friction_scale",
                            "default_offset", "aggressive_factor"},
                        "env config randomization");
      ReadIf(r, "pose_noise", c.randomization.pose_noise);
      ReadIf(r, "disturbance", c.randomization.disturbance);
      ReadIf(r, "mass_scale", c.randomization.mass_scale);
      ReadIf(r, "friction_scale", c.randomization.friction_scale);
      ReadIf(r, "default_offset", c.randomization.default_offset);
      ReadIf(r, "aggressive_factor", c.randomization.aggressive_factor);
    }
    if (j.contains("thresholds")) {
      const auto& t = j.at("thresholds");
      detail::CheckKeys(t, {"z_err_max", "grav_err_max", "relax_factor"}, "env config thresholds");
      ReadIf(t, "z_err_max", c.thresholds.z_err_max);
      ReadIf(t, "grav_err_max", c.thresholds.grav_err_max);
      ReadIf(t, "relax_factor", c.thresholds.relax_factor);
    }
    bool penalty_joints_given = false;
    if (j.contains("power_penalty")) {
      const auto& p = j.at("power_penalty");
      detail::CheckKeys(p, {"deadband", "norm", "weight", "joints"}, "env config power_penalty");
      ReadIf(p, "deadband", c.power_penalty.deadband);
      ReadIf(p, "norm", c.power_penalty.norm);
      ReadIf(p, "weight", c.power_penalty.weight);
      penalty_joints_given = p.contains("joints");
      ReadIf(p, "joints", c.power_penalty.joints);
    }
    if (!penalty_joints_given) {
      c.power_penalty.joints.clear();
      for (int i = 0; i < c.joints(); ++i) c.power_penalty.joints.push_back(i);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("env config: ") + e.what());
  }
  c.Validate();
  return c;
}

inline nlohmann::ordered_json EnvConfigToJson(const EnvConfig& c) {
  nlohmann::ordered_json j;
  auto links = nlohmann::ordered_json::array();
  for (const auto& l : c.links) links.push_back({{"mass", l.mass}, {"length", l.length}});
  j["links"] = links;
  j["actuators"] = c.actuators;
  j["actuator_catalog"] = ActuatorCatalogToJson(c.catalog);
  j["gravity"] = c.gravity;
  j["base_height"] = c.base_height;
  j["pd"] = {{"frequency_hz", c.pd_frequency},
             {"damping_ratio", c.pd_damping},
             {"tau_max", c.tau_max},
             {"default_q", c.default_q}};
  j["envelope_scale"] = c.envelope_scale;
  j["dt"] = c.dt;
  j["substeps"] = c.substeps;
  j["episode_len"] = c.episode_len;
  j["history"] = c.history;
  const auto& r = c.randomization;
  j["randomization"] = {{"pose_noise", r.pose_noise},
                        {"disturbance", r.disturbance},
                        {"mass_scale", r.mass_scale},
                        {"friction_scale", r.friction_scale},
                        {"default_offset", r.default_offset},
                        {"aggressive_factor", r.aggressive_factor}};
  j["thresholds"] = {{"z_err_max", c.thresholds.z_err_max},
                     {"grav_err_max", c.thresholds.grav_err_max},
                     {"relax_factor", c.thresholds.relax_factor}};
  j["power_penalty"] = {{"deadband", c.power_penalty.deadband},
                        {"norm", c.power_penalty.norm},
                        {"weight", c.power_penalty.weight},
                        {"joints", c.power_penalty.joints}};
  return j;
}

enum class EnvMode { kBase, kAggressive };

// Per-step diagnostics. Torque and power entries describe the final physics
// substep of the control step.
struct StepInfo {
  Eigen::VectorXd qdot_at_torque;  // joint speed the envelope was evaluated at
  Eigen::VectorXd tau_cmd;
  Eigen::VectorXd tau_clipped;
  Eigen::VectorXd friction;
  Eigen::VectorXd tau_applied;     // tau_clipped - friction
  Eigen::VectorXd disturbance;
  Eigen::VectorXd power;           // tau_applied * qdot
  TrackingErrors errors;
  double joint_error = 0.0;        // mean |q - q_ref|, rad
  double tracking_reward = 0.0;
  PowerPenalty penalty;
  bool terminated = false;         // threshold violation
  bool timed_out = false;
  bool numerical_blowup = false;
};

struct StepResult {
  Eigen::VectorXd observation;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

class ArmEnv {
 public:
  explicit ArmEnv(EnvConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.Validate();
    const int n = cfg_.joints();
    arm_.base_height = cfg_.base_height;
    for (const auto& l : cfg_.links) {
      arm_.lengths.push_back(l.length);
      nominal_masses_.push_back(l.mass);
    }
    for (int j = 0; j < n; ++j) {
      ActuatorParams p = LookupActuator(cfg_.catalog, cfg_.actuators[j]);
      p.tau_y1 *= cfg_.envelope_scale;
      p.tau_y2 *= cfg_.envelope_scale;
      nominal_actuators_.push_back(p);
      const double tau_max = cfg_.tau_max.empty() ? p.tau_y1 : cfg_.tau_max[j];
      const double q0 = cfg_.default_q.empty() ? 0.0 : cfg_.default_q[j];
      gains_.push_back(ComputePdGains(p, tau_max, q0, cfg_.pd_frequency, cfg_.pd_damping));
    }
    masses_ = nominal_masses_;
    actuators_ = nominal_actuators_;
    true_q0_ = Eigen::VectorXd::Zero(n);
    for (int j = 0; j < n; ++j) true_q0_[j] = gains_[j].q0;
    q_ = qdot_ = prev_action_ = Eigen::VectorXd::Zero(n);
  }

  const EnvConfig& config() const { return cfg_; }
  const ArmGeometry& geometry() const { return arm_; }
  int joints() const { return cfg_.joints(); }
  int action_dim() const { return joints(); }
  int proprio_dim() const { return 3 * joints(); }
  int command_dim() const { return 2 * joints() + 1; }
  int obs_dim() const { return proprio_dim() + command_dim() + cfg_.history * proprio_dim(); }
  double dt() const { return cfg_.dt; }
  EnvMode mode() const { return mode_; }
  bool relaxed() const { return mode_ == EnvMode::kAggressive; }
  int step_count() const { return step_; }
  int horizon() const { return horizon_; }
  bool done() const { return done_; }

  const Eigen::VectorXd& q() const { return q_; }
  const Eigen::VectorXd& qdot() const { return qdot_; }
  const Eigen::VectorXd& prev_action() const { return prev_action_; }
  const PdGains& gains(int j) const { return gains_[j]; }
  // Envelope-scaled catalog parameters (before per-episode friction scaling).
  const ActuatorParams& nominal_actuator(int j) const { return nominal_actuators_[j]; }
  const ActuatorParams& actuator(int j) const { return actuators_[j]; }
  const std::vector<double>& masses() const { return masses_; }
  const std::vector<double>& nominal_masses() const { return nominal_masses_; }
  const Eigen::VectorXd& true_default_q() const { return true_q0_; }
  const MotionClip& motion() const { return motion_; }

  Eigen::VectorXd DefaultQ() const {
    Eigen::VectorXd q0(joints());
    for (int j = 0; j < joints(); ++j) q0[j] = gains_[j].q0;
    return q0;
  }

  // Reference frame for a control step: nearest frame in time, clamped at the
  // last frame.
  static int ReferenceIndex(const MotionClip& m, double dt, int step) {
    const long idx = std::lround(step * dt * m.fps);
    return static_cast<int>(std::clamp<long>(idx, 0, m.frames() - 1));
  }
  Eigen::VectorXd ReferenceQ(int step) const {
    return motion_.q.row(ReferenceIndex(motion_, cfg_.dt, step)).transpose();
  }
  Eigen::VectorXd ReferenceQdot(int step) const {
    return ref_qdot_.row(ReferenceIndex(motion_, cfg_.dt, step)).transpose();
  }

  Eigen::VectorXd Reset(const MotionClip& motion, std::uint64_t seed,
                        EnvMode mode = EnvMode::kBase) {
    if (motion.joints() != joints()) {
      throw ArgumentError("env reset: motion has " + std::to_string(motion.joints()) +
                          " joints, env has " + std::to_string(joints()));
    }
    ValidateMotion(motion);
    motion_ = motion;
    ref_qdot_ = FiniteDifference(motion_.q, motion_.dt());
    mode_ = mode;
    rng_.seed(seed);
    range_ = mode == EnvMode::kAggressive
                 ? cfg_.randomization.Scaled(cfg_.randomization.aggressive_factor)
                 : cfg_.randomization;
    const int n = joints();
    for (int i = 0; i < n; ++i) masses_[i] = nominal_masses_[i] * (1.0 + Uniform(range_.mass_scale));
    for (int j = 0; j < n; ++j) {
      const double f = 1.0 + Uniform(range_.friction_scale);
      actuators_[j] = nominal_actuators_[j];
      actuators_[j].mu_s *= f;
      actuators_[j].mu_d *= f;
    }
    for (int j = 0; j < n; ++j) true_q0_[j] = gains_[j].q0 + Uniform(range_.default_offset);
    q_ = ReferenceQ(0);
    for (int j = 0; j < n; ++j) q_[j] += Uniform(range_.pose_noise);
    qdot_ = ReferenceQdot(0);
    prev_action_ = obs_action_ = Eigen::VectorXd::Zero(n);
    step_ = 0;
    horizon_ = std::min(cfg_.episode_len, motion_.frames());
    done_ = false;
    history_.assign(cfg_.history, Proprio());
    return Observation();
  }

  StepResult Step(const Eigen::VectorXd& action) { return Step(action, action); }

  // `obs_action` is what the next observation reports as the previous action;
  // a residual-refined rollout passes the base policy's own action here.
  StepResult Step(const Eigen::VectorXd& action, const Eigen::VectorXd& obs_action) {
    if (done_) throw ArgumentError("env step: episode is over, call Reset");
    if (action.size() != joints() || obs_action.size() != joints()) {
      throw DimensionError("env step: action dimension mismatch");
    }
    if (!action.allFinite()) throw ArgumentError("env step: non-finite action");

    if (cfg_.history > 0) {
      history_.push_front(Proprio());
      history_.pop_back();
    }
    const int n = joints();
    StepResult r;
    StepInfo& info = r.info;
    info.disturbance.resize(n);
    for (int j = 0; j < n; ++j) info.disturbance[j] = Uniform(range_.disturbance);

    const double h = cfg_.dt / cfg_.substeps;
    Eigen::VectorXd tau_cmd(n);
    for (int s = 0; s < cfg_.substeps; ++s) {
      for (int j = 0; j < n; ++j) {
        PdGains g = gains_[j];
        g.q0 = true_q0_[j];
        tau_cmd[j] = PdTorque(action[j], q_[j], qdot_[j], g);
      }
      info.qdot_at_torque = qdot_;
      info.tau_cmd = tau_cmd;
      Substep(tau_cmd, info.disturbance, h, &info);
      if (!q_.allFinite() || !qdot_.allFinite()) break;
    }
    prev_action_ = action;
    obs_action_ = obs_action;
    ++step_;

    if (!q_.allFinite() || !qdot_.allFinite()) {
      info.numerical_blowup = true;
      info.terminated = true;
      done_ = true;
      r.done = true;
      r.reward = 0.0;
      r.observation = Eigen::VectorXd::Zero(obs_dim());
      return r;
    }

    info.errors = CurrentErrors();
    const Eigen::VectorXd q_ref = ReferenceQ(step_);
    info.joint_error = (q_ - q_ref).cwiseAbs().mean();
    info.tracking_reward = -info.joint_error;
    info.penalty = NegativePowerPenalty(
        std::span<const double>(info.power.data(), info.power.size()), cfg_.power_penalty);
    info.terminated = CheckTermination(info.errors, cfg_.thresholds, relaxed());
    info.timed_out = !info.terminated && step_ >= horizon_;
    done_ = info.terminated || step_ >= horizon_;

    r.reward = info.tracking_reward + info.penalty.reward;
    r.done = done_;
    r.observation = Observation();
    return r;
  }

  // Advances the physics by one substep of length h under the given commanded
  // torques (before clipping and friction), with an additive disturbance.
  void Substep(const Eigen::VectorXd& tau_cmd, const Eigen::VectorXd& disturbance, double h,
               StepInfo* info = nullptr) {
    const int n = joints();
    Eigen::VectorXd clipped(n), fric(n), applied(n), slope(n);
    for (int j = 0; j < n; ++j) {
      clipped[j] = ClipTorque(tau_cmd[j], qdot_[j], actuators_[j]);
      fric[j] = FrictionTorque(qdot_[j], actuators_[j]);
      applied[j] = clipped[j] - fric[j];
      slope[j] = FrictionSlope(qdot_[j], actuators_[j]);
    }
    if (info) {
      info->tau_clipped = clipped;
      info->friction = fric;
      info->tau_applied = applied;
      info->power = applied.cwiseProduct(qdot_);
    }
    Eigen::MatrixXd mass;
    Eigen::VectorXd bias;
    Dynamics(q_, qdot_, masses_, &mass, &bias);
    // Friction enters linearly implicitly: (M + h df/dv) dv = h (tau - bias).
    mass.diagonal() += h * slope;
    const Eigen::VectorXd dv = mass.ldlt().solve(h * (applied + disturbance - bias));
    qdot_ += dv;
    q_ += h * qdot_;
  }

  // Joint-space mass matrix (with armature) and bias forces (centripetal,
  // Coriolis and gravity) for the given link masses.
  void Dynamics(const Eigen::VectorXd& q, const Eigen::VectorXd& qdot,
                const std::vector<double>& masses, Eigen::MatrixXd* mass,
                Eigen::VectorXd* bias) const {
    const int n = joints();
    const Eigen::VectorXd theta = AbsoluteAngles(q);
    const Eigen::VectorXd omega = AbsoluteAngles(qdot);
    mass->setZero(n, n);
    bias->setZero(n);
    Eigen::Vector2d drift = Eigen::Vector2d::Zero();  // Jdot * qdot of body i
    for (int i = 0; i < n; ++i) {
      const double l = arm_.lengths[i];
      drift += -l * omega[i] * omega[i] * Eigen::Vector2d(std::cos(theta[i]), std::sin(theta[i]));
      const Eigen::MatrixXd jac = ArmBodyJacobian(arm_, theta, i);
      *mass += masses[i] * jac.transpose() * jac;
      *bias += masses[i] * jac.transpose() * (drift + Eigen::Vector2d(0.0, cfg_.gravity));
    }
    for (int j = 0; j < n; ++j) (*mass)(j, j) += actuators_[j].armature;
  }

  // Gravity torques of the nominal (unrandomized) arm at pose q.
  Eigen::VectorXd NominalGravityTorque(const Eigen::VectorXd& q) const {
    Eigen::MatrixXd mass;
    Eigen::VectorXd bias;
    Dynamics(q, Eigen::VectorXd::Zero(joints()), nominal_masses_, &mass, &bias);
    return bias;
  }

  double MechanicalEnergy() const {
    Eigen::MatrixXd mass;
    Eigen::VectorXd bias;
    Dynamics(q_, qdot_, masses_, &mass, &bias);
    const Points p = ArmForwardKinematics(arm_, q_);
    double potential = 0.0;
    for (int i = 0; i < joints(); ++i) potential += masses_[i] * cfg_.gravity * p(i, 2);
    return 0.5 * qdot_.dot(mass * qdot_) + potential;
  }

  Points BodyPositions() const { return ArmForwardKinematics(arm_, q_); }
  Points BodyVelocities() const { return ArmBodyVelocities(arm_, q_, qdot_); }
  Points ReferenceBodyPositions(int step) const {
    return ArmForwardKinematics(arm_, ReferenceQ(step));
  }
  Points ReferenceBodyVelocities(int step) const {
    return ArmBodyVelocities(arm_, ReferenceQ(step), ReferenceQdot(step));
  }

  // Errors of the current state against the reference at the current step.
  TrackingErrors CurrentErrors() const {
    TrackingErrors e;
    const Points ref = ReferenceBodyPositions(step_);
    const Points rob = BodyPositions();
    for (int i = 0; i < joints(); ++i) e.body_z_error.push_back(ref(i, 2) - rob(i, 2));
    e.orientation_error = std::abs(DirectionError());
    return e;
  }

  // Signed end-effector direction error (reference minus robot), wrapped.
  double DirectionError() const {
    return WrapAngle(ReferenceQ(step_).sum() - q_.sum());
  }

  Eigen::VectorXd Proprio() const {
    const int n = joints();
    Eigen::VectorXd p(3 * n);
    p << q_ - DefaultQ(), qdot_, obs_action_;
    return p;
  }

  Eigen::VectorXd Command() const {
    const int n = joints();
    Eigen::VectorXd c(2 * n + 1);
    c << ReferenceQ(step_ + 1), ReferenceQdot(step_ + 1), DirectionError();
    return c;
  }

  Eigen::VectorXd Observation() const {
    Eigen::VectorXd o(obs_dim());
    const int pd = proprio_dim();
    o.head(pd) = Proprio();
    o.segment(pd, command_dim()) = Command();
    int off = pd + command_dim();
    for (const auto& h : history_) {
      o.segment(off, pd) = h;
      off += pd;
    }
    return o;
  }

 private:
  double Uniform(double half_width) {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    return half_width * (2.0 * u - 1.0);
  }

  EnvConfig cfg_;
  ArmGeometry arm_;
  std::vector<double> nominal_masses_;
  std::vector<double> masses_;
  std::vector<ActuatorParams> nominal_actuators_;
  std::vector<ActuatorParams> actuators_;
  std::vector<PdGains> gains_;
  Eigen::VectorXd true_q0_;

  MotionClip motion_;
  Eigen::MatrixXd ref_qdot_;
  EnvMode mode_ = EnvMode::kBase;
  RandomizationCfg range_;
  Rng rng_;
  Eigen::VectorXd q_, qdot_, prev_action_, obs_action_;
  std::deque<Eigen::VectorXd> history_;
  int step_ = 0;
  int horizon_ = 0;
  bool done_ = true;
};

// ---------------------------------------------------------------------------
// Privileged PD tracking expert.

struct ExpertPolicy {
  MotionClip motion;
  int lookahead = 1;
  // Feedforward terms added to the PD setpoint, all from the nominal model.
  bool velocity_ff = true;  // cancels PD damping at the reference speed
  bool gravity_ff = true;
  bool friction_ff = true;
  double action_clip = 10.0;
};

// Setpoint q_tar = q_ref + tau_ff / kp for the reference `lookahead` steps
// ahead of the current one, expressed as an action.
inline Eigen::VectorXd ExpertAction(const ExpertPolicy& expert, const ArmEnv& env) {
  const int n = env.joints();
  if (expert.motion.joints() != n) throw ArgumentError("expert: joint count mismatch");
  const int idx = ArmEnv::ReferenceIndex(expert.motion, env.dt(), env.step_count() + expert.lookahead);
  const Eigen::VectorXd q_ref = expert.motion.q.row(idx).transpose();
  // Same forward difference the env uses, evaluated at one frame.
  const int T = expert.motion.frames();
  const int i0 = std::min(idx, T - 2);
  const Eigen::VectorXd qd_ref =
      (expert.motion.q.row(i0 + 1) - expert.motion.q.row(i0)).transpose() * expert.motion.fps;

  Eigen::VectorXd tau_ff = Eigen::VectorXd::Zero(n);
  if (expert.gravity_ff) tau_ff += env.NominalGravityTorque(q_ref);
  Eigen::VectorXd action(n);
  for (int j = 0; j < n; ++j) {
    const PdGains& g = env.gains(j);
    if (expert.velocity_ff) tau_ff[j] += g.kd * qd_ref[j];
    if (expert.friction_ff) tau_ff[j] += FrictionTorque(qd_ref[j], env.nominal_actuator(j));
    const double q_tar = q_ref[j] + tau_ff[j] / g.kp;
    action[j] = std::clamp((q_tar - g.q0) / g.action_scale, -expert.action_clip,
                           expert.action_clip);
  }
  return action;
}

}  // namespace flowtrack
