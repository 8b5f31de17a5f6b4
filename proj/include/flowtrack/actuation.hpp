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

// Actuator-level physics, from the PD law to the torque-speed envelope.
//
// The control path for one joint is
//
//   action -> PdTorque -> ClipTorque (envelope at current speed)
//          -> minus FrictionTorque -> applied torque.
//
// All functions are pure.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include "flowtrack/common.hpp"
#include "json.hpp"

namespace flowtrack {

struct ActuatorParams {
  double tau_y1 = 0.0;      // N m, motoring ceiling
  double tau_y2 = 0.0;      // N m, braking ceiling
  double v_x1 = 0.0;        // rad/s, envelope knee
  double v_x2 = 0.0;        // rad/s, zero-torque speed
  double mu_s = 0.0;        // N m, Coulomb magnitude
  double v_act = 0.01;      // rad/s, tanh activation speed
  double mu_d = 0.0;        // N m s/rad, viscous coefficient
  double armature = 0.0;    // kg m^2, reflected rotor inertia

  void Validate() const {
    if (!(0.0 < v_x1 && v_x1 < v_x2)) throw ArgumentError("actuator: need 0 < v_x1 < v_x2");
    if (!(tau_y1 > 0.0) || !(tau_y2 > 0.0)) throw ArgumentError("actuator: torque ceilings must be positive");
    if (!(mu_s >= 0.0) || !(mu_d >= 0.0)) throw ArgumentError("actuator: friction must be non-negative");
    if (!(v_act > 0.0)) throw ArgumentError("actuator: v_act must be positive");
    if (!(armature > 0.0)) throw ArgumentError("actuator: armature must be positive");
  }
};

using ActuatorCatalog = std::map<std::string, ActuatorParams>;

// The four motor models of the G1 humanoid.
inline ActuatorCatalog DefaultActuatorCatalog() {
  return {
      {"5020-16", {24.8, 31.9, 30.86, 40.13, 0.6, 0.01, 0.06, 3.610e-03}},
      {"7520-14.3", {71.0, 83.3, 22.63, 35.52, 1.6, 0.01, 0.16, 1.018e-02}},
      {"7520-22.5", {111.0, 131.0, 14.5, 22.7, 2.4, 0.01, 0.24, 2.510e-02}},
      {"4010-25", {4.8, 8.6, 15.3, 24.76, 0.6, 0.01, 0.06, 4.250e-03}},
  };
}

inline nlohmann::ordered_json ActuatorToJson(const ActuatorParams& p) {
  nlohmann::ordered_json j;
  j["tau_y1"] = p.tau_y1;
  j["tau_y2"] = p.tau_y2;
  j["v_x1"] = p.v_x1;
  j["v_x2"] = p.v_x2;
  j["mu_s"] = p.mu_s;
  j["v_act"] = p.v_act;
  j["mu_d"] = p.mu_d;
  j["armature"] = p.armature;
  return j;
}

inline ActuatorParams ActuatorFromJson(const nlohmann::json& j) {
  auto get = [&j](const char* key) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_number()) {
      throw ConfigError(std::string("actuator catalog: missing numeric field '") + key + "'");
    }
    return it->get<double>();
  };
  ActuatorParams p{get("tau_y1"), get("tau_y2"), get("v_x1"), get("v_x2"),
                   get("mu_s"),   get("v_act"),  get("mu_d"), get("armature")};
  p.Validate();
  return p;
}

inline ActuatorCatalog ActuatorCatalogFromJson(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("actuator catalog: expected an object");
  ActuatorCatalog cat;
  for (auto it = j.begin(); it != j.end(); ++it) cat[it.key()] = ActuatorFromJson(it.value());
  return cat;
}

inline nlohmann::ordered_json ActuatorCatalogToJson(const ActuatorCatalog& cat) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [name, p] : cat) j[name] = ActuatorToJson(p);
  return j;
}

inline ActuatorCatalog LoadActuatorCatalog(const std::filesystem::path& path) {
  try {
    return ActuatorCatalogFromJson(nlohmann::json::parse(ReadFile(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("actuator catalog: " + std::string(e.what()));
  }
}

inline const ActuatorParams& LookupActuator(const ActuatorCatalog& cat,
                                            const std::string& name) {
  auto it = cat.find(name);
  if (it == cat.end()) {
    std::string known;
    for (const auto& [k, v] : cat) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown actuator '" + name + "' (known: " + known + ")");
  }
  return it->second;
}

// Motor model driving a G1 joint, keyed on the joint name (e.g.
// "left_knee_joint"). Hip pitch uses the 7520-22.5 variant.
inline std::optional<std::string> G1MotorForJoint(const std::string& joint) {
  static const std::vector<std::pair<const char*, const char*>> kTable = {
      {"hip_pitch", "7520-22.5"},     {"hip_roll", "7520-22.5"},
      {"knee", "7520-22.5"},          {"hip_yaw", "7520-14.3"},
      {"ankle_pitch", "5020-16"},     {"ankle_roll", "5020-16"},
      {"waist_roll", "5020-16"},      {"waist_pitch", "5020-16"},
      {"waist_yaw", "7520-14.3"},     {"shoulder_pitch", "5020-16"},
      {"shoulder_roll", "5020-16"},   {"shoulder_yaw", "5020-16"},
      {"elbow", "5020-16"},           {"wrist_roll", "5020-16"},
      {"wrist_pitch", "4010-25"},     {"wrist_yaw", "4010-25"},
  };
  for (const auto& [key, motor] : kTable) {
    if (joint.find(key) != std::string::npos) return std::string(motor);
  }
  return std::nullopt;
}

// Indices of joints matching ".*_knee_joint".
inline std::vector<int> KneeJointSelector(std::span<const std::string> names) {
  static const std::regex kKnee(".*_knee_joint");
  std::vector<int> out;
  for (size_t i = 0; i < names.size(); ++i) {
    if (std::regex_match(names[i], kKnee)) out.push_back(static_cast<int>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PD control.

struct PdGains {
  double kp = 0.0;            // N m / rad
  double kd = 0.0;            // N m s / rad
  double action_scale = 0.0;  // rad per unit action
  double q0 = 0.0;            // rad
};

// kp = I w^2, kd = 2 I zeta w with w = 2 pi f; the action scale maps one unit
// of action onto a quarter of tau_max at the PD stiffness.
inline PdGains ComputePdGains(const ActuatorParams& p, double tau_max, double q0,
                              double f_hz = 10.0, double zeta = 2.0) {
  if (!(f_hz > 0.0)) throw ArgumentError("pd gains: natural frequency must be positive");
  if (!(tau_max > 0.0)) throw ArgumentError("pd gains: tau_max must be positive");
  if (!(zeta > 0.0)) throw ArgumentError("pd gains: damping ratio must be positive");
  const double w = 2.0 * std::numbers::pi * f_hz;
  PdGains g;
  g.kp = p.armature * w * w;
  g.kd = 2.0 * p.armature * zeta * w;
  g.action_scale = 0.25 * tau_max / g.kp;
  g.q0 = q0;
  return g;
}

inline double PdTarget(double action, const PdGains& g) {
  return g.q0 + g.action_scale * action;
}

inline double PdTorque(double action, double q, double qdot, const PdGains& g) {
  return g.kp * (PdTarget(action, g) - q) - g.kd * qdot;
}

// ---------------------------------------------------------------------------
// Torque-speed envelope.

// Motoring ceiling when torque and velocity are aligned, braking otherwise
// (including v * tau_in == 0).
inline double TorqueCeiling(double v, double tau_in, const ActuatorParams& p) {
  return v * tau_in > 0.0 ? p.tau_y1 : p.tau_y2;
}

// Admissible torque magnitude L(v) for a command of the given sign.
inline double EnvelopeLimit(double v, double tau_in, const ActuatorParams& p) {
  const double ceiling = TorqueCeiling(v, tau_in, p);
  const double speed = std::abs(v);
  if (speed < p.v_x1) return ceiling;
  if (speed <= p.v_x2) return ceiling * (1.0 - (speed - p.v_x1) / (p.v_x2 - p.v_x1));
  return 0.0;
}

inline double ClipTorque(double tau_cmd, double v, const ActuatorParams& p) {
  const double limit = EnvelopeLimit(v, tau_cmd, p);
  return std::clamp(tau_cmd, -limit, limit);
}

// Smoothed Coulomb plus viscous loss.
inline double FrictionTorque(double v, const ActuatorParams& p) {
  return p.mu_s * std::tanh(v / p.v_act) + p.mu_d * v;
}

// d(FrictionTorque)/dv, used by the integrator's implicit friction update.
inline double FrictionSlope(double v, const ActuatorParams& p) {
  const double c = std::cosh(v / p.v_act);
  const double sech2 = std::isfinite(c) ? 1.0 / (c * c) : 0.0;
  return p.mu_s / p.v_act * sech2 + p.mu_d;
}

// Friction is subtracted after clipping, so it may flip the sign of a small
// clipped command.
inline double Actuate(double tau_cmd, double v, const ActuatorParams& p) {
  return ClipTorque(tau_cmd, v, p) - FrictionTorque(v, p);
}

inline double JointPower(double tau, double omega) { return tau * omega; }

// ---------------------------------------------------------------------------
// Negative-power penalty.

struct PowerPenaltyCfg {
  double deadband = 150.0;  // W
  double norm = 500.0;
  double weight = -10.0;
  std::vector<int> joints;  // penalized joint indices

  void Validate() const {
    if (!(deadband >= 0.0)) throw ArgumentError("power penalty: deadband must be >= 0");
    if (!(norm > 0.0)) throw ArgumentError("power penalty: norm must be positive");
  }
};

struct PowerPenalty {
  double cost = 0.0;
  double reward = 0.0;
};

inline PowerPenalty NegativePowerPenalty(std::span<const double> powers,
                                         const PowerPenaltyCfg& cfg) {
  cfg.Validate();
  PowerPenalty out;
  for (int j : cfg.joints) {
    if (j < 0 || j >= static_cast<int>(powers.size())) {
      throw ArgumentError("power penalty: joint index " + std::to_string(j) + " out of range");
    }
    const double excess = std::max(-powers[j] - cfg.deadband, 0.0) / cfg.norm;
    out.cost += excess * excess;
  }
  out.reward = cfg.weight * out.cost;
  return out;
}

}  // namespace flowtrack
