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

// Motion complexity metrics and difficulty scores. Tracking errors and the
// termination rule are shared by training and evaluation.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <set>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "flowtrack/common.hpp"
#include "flowtrack/motion.hpp"

namespace flowtrack {

// ---------------------------------------------------------------------------
// Motion complexity.

struct KinematicMaxima {
  double v_max = 0.0;
  double a_max = 0.0;
  double j_max = 0.0;
};

struct ComplexityScores {
  double v_max = 0.0;        // rad/s
  double a_max = 0.0;        // rad/s^2
  double j_max = 0.0;        // rad/s^3
  double ang_max = 0.0;      // rad/s, base angular speed (body frame)
  double v_com_z_max = 0.0;  // m/s
  double airborne = 0.0;     // [0, 1]
  double f_switch = 0.0;     // Hz
  // [s_ang, s_v, s_a, s_com, s_air, s_sw]
  std::array<double, 6> s{};
};

// Per-order maxima of the absolute derivatives over all frames and columns.
inline KinematicMaxima MaxKinematics(const Eigen::Ref<const Eigen::MatrixXd>& q,
                                     double dt) {
  if (q.rows() < 4) throw DimensionError("max_kinematics: at least 4 frames required");
  const Eigen::MatrixXd v = FiniteDifference(q, dt);
  const Eigen::MatrixXd a = FiniteDifference(v, dt);
  const Eigen::MatrixXd j = FiniteDifference(a, dt);
  auto max_abs = [](const Eigen::MatrixXd& m) {
    return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
  };
  return {max_abs(v), max_abs(a), max_abs(j)};
}

// Peak |d/dt z_com| with z_com the mass-weighted mean body height. Uniform
// masses when `masses` is empty.
inline double ComVerticalSpeed(const MotionClip& clip,
                               std::span<const double> masses = {}) {
  const int B = clip.bodies();
  if (B == 0) throw ArgumentError("com speed: clip has no bodies");
  std::vector<double> w(masses.begin(), masses.end());
  if (w.empty()) w.assign(B, 1.0);
  if (static_cast<int>(w.size()) != B) throw DimensionError("com speed: one mass per body");
  double total = 0.0;
  for (double m : w) total += m;
  if (!(total > 0.0)) throw ArgumentError("com speed: total mass must be positive");

  Eigen::MatrixXd z(clip.frames(), 1);
  for (int t = 0; t < clip.frames(); ++t) {
    double acc = 0.0;
    for (int b = 0; b < B; ++b) acc += w[b] * clip.body_pos[t](b, 2);
    z(t, 0) = acc / total;
  }
  return FiniteDifference(z, clip.dt()).cwiseAbs().maxCoeff();
}

// Fraction of frames in which every foot is above h_air.
inline double AirborneRatio(const MotionClip& clip, double h_air = 0.05) {
  if (clip.feet_indices.empty()) throw ArgumentError("airborne: empty feet set");
  int airborne = 0;
  for (int t = 0; t < clip.frames(); ++t) {
    double lowest = std::numeric_limits<double>::infinity();
    for (int f : clip.feet_indices) lowest = std::min(lowest, clip.body_pos[t](f, 2));
    if (lowest > h_air) ++airborne;
  }
  return static_cast<double>(airborne) / clip.frames();
}

// Contact-state flips per second; a frame counts once however many
// end-effectors change.
inline double ContactSwitchFrequency(const ContactMatrix& contacts, double dt) {
  const Eigen::Index T = contacts.rows();
  if (T < 2) throw DimensionError("contact switch: at least 2 frames required");
  int flips = 0;
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    if ((contacts.row(t + 1) != contacts.row(t)).any()) ++flips;
  }
  return flips / ((T - 1) * dt);
}

// Base angular velocity in the base (body) frame from consecutive quaternions
// via the log map; final row repeated like FiniteDifference.
inline Eigen::MatrixXd BaseAngularVelocity(const MotionClip& clip) {
  const int T = clip.frames();
  if (T < 2) throw DimensionError("angular velocity: at least 2 frames required");
  Eigen::MatrixXd w(T, 3);
  for (int t = 0; t + 1 < T; ++t) {
    const Eigen::Quaterniond a(clip.base_quat(t, 0), clip.base_quat(t, 1),
                               clip.base_quat(t, 2), clip.base_quat(t, 3));
    const Eigen::Quaterniond b(clip.base_quat(t + 1, 0), clip.base_quat(t + 1, 1),
                               clip.base_quat(t + 1, 2), clip.base_quat(t + 1, 3));
    Eigen::Quaterniond d = a.conjugate() * b;
    if (d.w() < 0.0) d.coeffs() = -d.coeffs();
    const double s = d.vec().norm();
    Eigen::Vector3d rotvec = Eigen::Vector3d::Zero();
    if (s > 0.0) rotvec = d.vec() / s * (2.0 * std::atan2(s, d.w()));
    w.row(t) = rotvec.transpose() / clip.dt();
  }
  w.row(T - 1) = w.row(T - 2);
  return w;
}

// Clamped linear scalings onto [0, 1].
inline std::array<double, 6> DifficultyScores(const ComplexityScores& raw) {
  auto cap = [](double x) { return std::clamp(x, 0.0, 1.0); };
  return {cap(raw.ang_max / 20.0),     cap(raw.v_max / 20.0),
          cap(raw.a_max / 200.0),      cap(raw.v_com_z_max / 2.0),
          cap(raw.airborne),           cap(raw.f_switch / 10.0)};
}

inline ComplexityScores AnalyzeMotion(const MotionClip& clip, double h_air = 0.05,
                                      std::span<const double> masses = {}) {
  ValidateMotion(clip);
  ComplexityScores c;
  const KinematicMaxima k = MaxKinematics(clip.q, clip.dt());
  c.v_max = k.v_max;
  c.a_max = k.a_max;
  c.j_max = k.j_max;
  c.ang_max = BaseAngularVelocity(clip).rowwise().norm().maxCoeff();
  c.v_com_z_max = ComVerticalSpeed(clip, masses);
  c.airborne = clip.feet_indices.empty() ? 0.0 : AirborneRatio(clip, h_air);
  c.f_switch = clip.end_effectors() == 0
                   ? 0.0
                   : ContactSwitchFrequency(clip.contacts, clip.dt());
  c.s = DifficultyScores(c);
  return c;
}

// ---------------------------------------------------------------------------
// Tracking errors. Inputs are per-frame N x 3 blocks already aligned to the
// robot; all results are in millimetres.

namespace detail {

inline void CheckSameShape(const Trajectory& a, const Trajectory& b,
                           const char* what) {
  if (a.size() != b.size()) throw DimensionError(std::string(what) + ": frame count mismatch");
  for (size_t t = 0; t < a.size(); ++t) {
    if (a[t].rows() != b[t].rows()) {
      throw DimensionError(std::string(what) + ": body count mismatch");
    }
  }
}

inline double MeanBodyError(const Points& a, const Points& b) {
  if (a.rows() == 0) return 0.0;
  return (a - b).rowwise().norm().mean();
}

}  // namespace detail

inline double Mpjpe(const Trajectory& ref, const Trajectory& rob) {
  detail::CheckSameShape(ref, rob, "mpjpe");
  if (ref.empty()) throw UndefinedMetricError("mpjpe: empty trajectory");
  double acc = 0.0;
  for (size_t t = 0; t < ref.size(); ++t) acc += detail::MeanBodyError(ref[t], rob[t]);
  return 1000.0 * acc / ref.size();
}

inline double DeltaVel(const Trajectory& ref_v, const Trajectory& rob_v, double dt) {
  detail::CheckSameShape(ref_v, rob_v, "delta_vel");
  if (ref_v.empty()) throw UndefinedMetricError("delta_vel: empty trajectory");
  double acc = 0.0;
  for (size_t t = 0; t < ref_v.size(); ++t) acc += detail::MeanBodyError(ref_v[t], rob_v[t]);
  return 1000.0 * dt * acc / ref_v.size();
}

// Accelerations are backward differences of velocity, a_t = (v_t - v_{t-1})/dt.
// Step 0 has no predecessor and is skipped. `reset_steps` lists the last
// frame before each environment reset; the step right after it is skipped.
inline double DeltaAcc(const Trajectory& ref_v, const Trajectory& rob_v, double dt,
                       const std::set<int>& reset_steps = {}) {
  detail::CheckSameShape(ref_v, rob_v, "delta_acc");
  if (ref_v.size() < 2) throw DimensionError("delta_acc: at least 2 frames required");
  double acc = 0.0;
  int used = 0;
  for (size_t t = 1; t < ref_v.size(); ++t) {
    if (reset_steps.count(static_cast<int>(t) - 1)) continue;
    const Points a_ref = (ref_v[t] - ref_v[t - 1]) / dt;
    const Points a_rob = (rob_v[t] - rob_v[t - 1]) / dt;
    acc += detail::MeanBodyError(a_ref, a_rob);
    ++used;
  }
  if (used == 0) throw UndefinedMetricError("delta_acc: every step is excluded");
  return 1000.0 * dt * dt * acc / used;
}

// ---------------------------------------------------------------------------
// Termination and success.

struct TerminationThresholds {
  double z_err_max = 0.25;    // m
  double grav_err_max = 0.8;  // rad
  double relax_factor = 1.5;

  double z_limit(bool relaxed) const {
    return relaxed ? z_err_max * relax_factor : z_err_max;
  }
  double orientation_limit(bool relaxed) const {
    return relaxed ? grav_err_max * relax_factor : grav_err_max;
  }
  void Validate() const {
    if (!(z_err_max > 0.0) || !(grav_err_max > 0.0) || !(relax_factor > 0.0)) {
      throw ArgumentError("termination thresholds must be positive");
    }
  }
};

// Per-step errors the termination rule looks at.
struct TrackingErrors {
  // |z_ref - z| for the torso and every tracked end-effector.
  std::vector<double> body_z_error;
  // Angle of the gravity-vector discrepancy from the torso orientation error.
  double orientation_error = 0.0;
};

inline bool CheckTermination(const TrackingErrors& err,
                             const TerminationThresholds& thr, bool relaxed) {
  const double z_lim = thr.z_limit(relaxed);
  for (double e : err.body_z_error) {
    if (std::abs(e) > z_lim) return true;
  }
  return std::abs(err.orientation_error) > thr.orientation_limit(relaxed);
}

struct EpisodeOutcome {
  bool terminated_early = false;
};

inline double SuccessRate(std::span<const EpisodeOutcome> episodes) {
  if (episodes.empty()) throw ArgumentError("success rate: no episodes");
  int ok = 0;
  for (const auto& e : episodes) ok += e.terminated_early ? 0 : 1;
  return static_cast<double>(ok) / episodes.size();
}

struct TrackingMetrics {
  double mpjpe_mm = 0.0;
  double dvel = 0.0;  // mm/frame
  double dacc = 0.0;  // mm/frame^2
  double success_rate = 0.0;
  int episodes = 0;
};

// Mean of per-episode values; episodes are weighted equally regardless of
// their length.
inline double MeanOfEpisodeMeans(std::span<const double> per_episode) {
  if (per_episode.empty()) throw UndefinedMetricError("aggregate: no episodes");
  double acc = 0.0;
  for (double v : per_episode) acc += v;
  return acc / per_episode.size();
}

}  // namespace flowtrack
