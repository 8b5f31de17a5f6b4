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

// Reference motion clips: data model, JSON ingestion, finite differencing,
// fixed-length segmentation and synthetic sinusoid generation.

#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowtrack/common.hpp"
#include "flowtrack/kinematics.hpp"
#include "json.hpp"

namespace flowtrack {

using ContactMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Time-indexed reference motion. Row t of every array is frame t.
struct MotionClip {
  double fps = 50.0;
  std::vector<std::string> joint_names;
  Eigen::MatrixXd q;           // T x J, rad
  Eigen::MatrixXd base_pos;    // T x 3, m
  Eigen::MatrixXd base_quat;   // T x 4, (w, x, y, z)
  Trajectory body_pos;         // T blocks of B x 3, m
  ContactMatrix contacts;      // T x K
  std::vector<int> feet_indices;

  int frames() const { return static_cast<int>(q.rows()); }
  int joints() const { return static_cast<int>(q.cols()); }
  int bodies() const {
    return body_pos.empty() ? 0 : static_cast<int>(body_pos.front().rows());
  }
  int end_effectors() const { return static_cast<int>(contacts.cols()); }
  double dt() const { return 1.0 / fps; }
  double duration() const { return frames() / fps; }

  bool operator==(const MotionClip& o) const {
    if (fps != o.fps || joint_names != o.joint_names ||
        feet_indices != o.feet_indices || body_pos.size() != o.body_pos.size()) {
      return false;
    }
    if (q.rows() != o.q.rows() || q.cols() != o.q.cols() || q != o.q) return false;
    if (base_pos != o.base_pos || base_quat != o.base_quat) return false;
    if (contacts.rows() != o.contacts.rows() ||
        contacts.cols() != o.contacts.cols() || !(contacts == o.contacts).all()) {
      return false;
    }
    for (size_t t = 0; t < body_pos.size(); ++t) {
      if (body_pos[t].rows() != o.body_pos[t].rows() ||
          body_pos[t] != o.body_pos[t]) {
        return false;
      }
    }
    return true;
  }
};

// Checks every structural and numeric invariant of a clip.
inline void ValidateMotion(const MotionClip& clip) {
  if (!(clip.fps > 0.0) || !std::isfinite(clip.fps)) {
    throw ValidationError("motion: fps must be positive and finite");
  }
  const int T = clip.frames();
  if (T < 2) throw ValidationError("motion: at least 2 frames required");
  if (static_cast<int>(clip.joint_names.size()) != clip.joints()) {
    throw DimensionError("motion: joint_names length does not match q columns");
  }
  if (clip.base_pos.rows() != T || clip.base_pos.cols() != 3) {
    throw DimensionError("motion: base_pos must be T x 3");
  }
  if (clip.base_quat.rows() != T || clip.base_quat.cols() != 4) {
    throw DimensionError("motion: base_quat must be T x 4");
  }
  if (static_cast<int>(clip.body_pos.size()) != T) {
    throw DimensionError("motion: body_pos length does not match frame count");
  }
  if (clip.contacts.rows() != T) {
    throw DimensionError("motion: contacts length does not match frame count");
  }
  const int B = clip.bodies();
  for (const Points& p : clip.body_pos) {
    if (p.rows() != B) throw DimensionError("motion: body count varies between frames");
    if (!p.allFinite()) throw ValidationError("motion: non-finite body_pos");
  }
  if (!clip.q.allFinite()) throw ValidationError("motion: non-finite q");
  if (!clip.base_pos.allFinite()) throw ValidationError("motion: non-finite base_pos");
  if (!clip.base_quat.allFinite()) throw ValidationError("motion: non-finite base_quat");
  for (int t = 0; t < T; ++t) {
    if (std::abs(clip.base_quat.row(t).norm() - 1.0) > 1e-6) {
      throw ValidationError("motion: base_quat row " + std::to_string(t) +
                            " is not unit norm");
    }
  }
  for (int f : clip.feet_indices) {
    if (f < 0 || f >= B) {
      throw ValidationError("motion: feet index " + std::to_string(f) +
                            " out of range");
    }
  }
}

namespace detail {

inline const nlohmann::json& RequireKey(const nlohmann::json& obj,
                                        const std::string& key,
                                        const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw SchemaError("motion: missing required key '" + key + "' in " + where);
  }
  return *it;
}

inline void RejectExtraKeys(const nlohmann::json& obj,
                            const std::set<std::string>& allowed,
                            const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw SchemaError("motion: unexpected key '" + it.key() + "' in " + where);
    }
  }
}

inline std::vector<double> NumberArray(const nlohmann::json& j,
                                       const std::string& key) {
  if (!j.is_array()) throw SchemaError("motion: '" + key + "' must be an array");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) {
      throw SchemaError("motion: '" + key + "' must contain numbers");
    }
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace detail

inline MotionClip MotionFromJson(const nlohmann::json& root) {
  using detail::NumberArray;
  using detail::RequireKey;
  if (!root.is_object()) throw SchemaError("motion: top level must be an object");
  detail::RejectExtraKeys(root, {"fps", "joint_names", "frames", "feet_indices"},
                          "motion");

  MotionClip clip;
  const auto& fps = RequireKey(root, "fps", "motion");
  if (!fps.is_number()) throw SchemaError("motion: 'fps' must be a number");
  clip.fps = fps.get<double>();

  const auto& names = RequireKey(root, "joint_names", "motion");
  if (!names.is_array()) throw SchemaError("motion: 'joint_names' must be an array");
  for (const auto& n : names) {
    if (!n.is_string()) throw SchemaError("motion: joint names must be strings");
    clip.joint_names.push_back(n.get<std::string>());
  }

  const auto& feet = RequireKey(root, "feet_indices", "motion");
  if (!feet.is_array()) throw SchemaError("motion: 'feet_indices' must be an array");
  for (const auto& f : feet) {
    if (!f.is_number_integer()) {
      throw SchemaError("motion: 'feet_indices' must contain integers");
    }
    clip.feet_indices.push_back(f.get<int>());
  }

  const auto& frames = RequireKey(root, "frames", "motion");
  if (!frames.is_array()) throw SchemaError("motion: 'frames' must be an array");
  const int T = static_cast<int>(frames.size());
  const int J = static_cast<int>(clip.joint_names.size());
  clip.q.resize(T, J);
  clip.base_pos.resize(T, 3);
  clip.base_quat.resize(T, 4);
  clip.body_pos.resize(T);
  int B = -1, K = -1;

  for (int t = 0; t < T; ++t) {
    const auto& fr = frames[t];
    const std::string where = "frame " + std::to_string(t);
    if (!fr.is_object()) throw SchemaError("motion: " + where + " must be an object");
    detail::RejectExtraKeys(fr, {"q", "base_pos", "base_quat", "body_pos", "contacts"},
                            where);

    const auto q = NumberArray(RequireKey(fr, "q", where), "q");
    if (static_cast<int>(q.size()) != J) {
      throw DimensionError("motion: " + where + " q has " + std::to_string(q.size()) +
                           " entries, expected " + std::to_string(J));
    }
    for (int j = 0; j < J; ++j) clip.q(t, j) = q[j];

    const auto bp = NumberArray(RequireKey(fr, "base_pos", where), "base_pos");
    if (bp.size() != 3) throw DimensionError("motion: " + where + " base_pos must have 3 entries");
    for (int k = 0; k < 3; ++k) clip.base_pos(t, k) = bp[k];

    const auto bq = NumberArray(RequireKey(fr, "base_quat", where), "base_quat");
    if (bq.size() != 4) throw DimensionError("motion: " + where + " base_quat must have 4 entries");
    for (int k = 0; k < 4; ++k) clip.base_quat(t, k) = bq[k];

    const auto& bodies = RequireKey(fr, "body_pos", where);
    if (!bodies.is_array()) throw SchemaError("motion: 'body_pos' must be an array");
    if (B < 0) B = static_cast<int>(bodies.size());
    if (static_cast<int>(bodies.size()) != B) {
      throw DimensionError("motion: " + where + " body count differs from frame 0");
    }
    clip.body_pos[t].resize(B, 3);
    for (int b = 0; b < B; ++b) {
      const auto xyz = NumberArray(bodies[b], "body_pos");
      if (xyz.size() != 3) throw DimensionError("motion: body_pos entries must have 3 entries");
      for (int k = 0; k < 3; ++k) clip.body_pos[t](b, k) = xyz[k];
    }

    const auto& contacts = RequireKey(fr, "contacts", where);
    if (!contacts.is_array()) throw SchemaError("motion: 'contacts' must be an array");
    if (K < 0) {
      K = static_cast<int>(contacts.size());
      clip.contacts.resize(T, K);
    }
    if (static_cast<int>(contacts.size()) != K) {
      throw DimensionError("motion: " + where + " contacts length differs from frame 0");
    }
    for (int k = 0; k < K; ++k) {
      if (!contacts[k].is_boolean()) throw SchemaError("motion: contacts must be booleans");
      clip.contacts(t, k) = contacts[k].get<bool>();
    }
  }
  if (T == 0) clip.contacts.resize(0, 0);

  // Retargeting pipelines emit slightly denormalized quaternions; accept drift
  // up to 1e-3 and renormalize anything outside the 1e-6 invariant band.
  for (int t = 0; t < T; ++t) {
    const double n = clip.base_quat.row(t).norm();
    if (std::abs(n - 1.0) > 1e-3) {
      throw ValidationError("motion: base_quat row " + std::to_string(t) +
                            " has norm " + std::to_string(n));
    }
    if (std::abs(n - 1.0) > 1e-6) clip.base_quat.row(t) /= n;
  }
  ValidateMotion(clip);
  return clip;
}

inline nlohmann::ordered_json MotionToJson(const MotionClip& clip) {
  ValidateMotion(clip);
  nlohmann::ordered_json root;
  root["fps"] = clip.fps;
  root["joint_names"] = clip.joint_names;
  auto frames = nlohmann::ordered_json::array();
  for (int t = 0; t < clip.frames(); ++t) {
    nlohmann::ordered_json fr;
    std::vector<double> q(clip.q.cols());
    for (int j = 0; j < clip.joints(); ++j) q[j] = clip.q(t, j);
    fr["q"] = q;
    fr["base_pos"] = {clip.base_pos(t, 0), clip.base_pos(t, 1), clip.base_pos(t, 2)};
    fr["base_quat"] = {clip.base_quat(t, 0), clip.base_quat(t, 1),
                       clip.base_quat(t, 2), clip.base_quat(t, 3)};
    auto bodies = nlohmann::ordered_json::array();
    for (int b = 0; b < clip.bodies(); ++b) {
      bodies.push_back({clip.body_pos[t](b, 0), clip.body_pos[t](b, 1),
                        clip.body_pos[t](b, 2)});
    }
    fr["body_pos"] = std::move(bodies);
    auto contacts = nlohmann::ordered_json::array();
    for (int k = 0; k < clip.end_effectors(); ++k) {
      contacts.push_back(static_cast<bool>(clip.contacts(t, k)));
    }
    fr["contacts"] = std::move(contacts);
    frames.push_back(std::move(fr));
  }
  root["frames"] = std::move(frames);
  root["feet_indices"] = clip.feet_indices;
  return root;
}

inline MotionClip LoadMotion(const std::filesystem::path& path) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(ReadFile(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError("motion: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return MotionFromJson(root);
}

// Doubles are written in shortest round-trip form, so LoadMotion(SaveMotion(c))
// reproduces every array bit-exactly.
inline void SaveMotion(const MotionClip& clip, const std::filesystem::path& path) {
  const std::string text = MotionToJson(clip).dump(1) + "\n";
  WriteFileAtomic(path, text);
}

// Forward differences; the final row repeats the previous derivative so the
// output stays aligned with the input frames.
inline Eigen::MatrixXd FiniteDifference(const Eigen::Ref<const Eigen::MatrixXd>& series,
                                        double dt) {
  const Eigen::Index T = series.rows();
  if (T < 2) throw DimensionError("finite difference: at least 2 rows required");
  if (!(dt > 0.0)) throw ArgumentError("finite difference: dt must be positive");
  Eigen::MatrixXd d(T, series.cols());
  d.topRows(T - 1) = (series.bottomRows(T - 1) - series.topRows(T - 1)) / dt;
  d.row(T - 1) = d.row(T - 2);
  return d;
}

// Frames [begin, begin + count) of a clip.
inline MotionClip SliceClip(const MotionClip& clip, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > clip.frames()) {
    throw ArgumentError("slice: frame range out of bounds");
  }
  MotionClip out;
  out.fps = clip.fps;
  out.joint_names = clip.joint_names;
  out.feet_indices = clip.feet_indices;
  out.q = clip.q.middleRows(begin, count);
  out.base_pos = clip.base_pos.middleRows(begin, count);
  out.base_quat = clip.base_quat.middleRows(begin, count);
  out.body_pos.assign(clip.body_pos.begin() + begin,
                      clip.body_pos.begin() + begin + count);
  out.contacts = clip.contacts.middleRows(begin, count);
  return out;
}

// Splits a clip into fixed-length pieces. Clips no longer than `seconds` come
// back whole; a trailing remainder is kept only if it spans at least 1 s (and
// at least 2 frames).
inline std::vector<MotionClip> SegmentClips(const MotionClip& clip,
                                            double seconds = 10.0) {
  if (!(seconds > 0.0)) throw ArgumentError("segment: seconds must be positive");
  ValidateMotion(clip);
  const int per_clip = static_cast<int>(std::lround(seconds * clip.fps));
  if (clip.frames() <= per_clip || per_clip < 2) return {clip};

  std::vector<MotionClip> out;
  const int T = clip.frames();
  int begin = 0;
  for (; begin + per_clip <= T; begin += per_clip) {
    out.push_back(SliceClip(clip, begin, per_clip));
  }
  const int rest = T - begin;
  const int min_rest = std::max(2, static_cast<int>(std::lround(clip.fps)));
  if (rest >= min_rest) out.push_back(SliceClip(clip, begin, rest));
  return out;
}

struct SynthMotionSpec {
  int n_joints = 2;
  double duration = 10.0;  // s
  double fps = 50.0;
  std::vector<double> amplitude;  // rad, per joint
  std::vector<double> frequency;  // Hz, per joint
  std::vector<double> phase;      // rad, per joint
  // Arm geometry used to derive body positions.
  std::vector<double> link_lengths;  // defaults to 0.3 m per link when empty
  double base_height = 1.0;
};

// Joint-space sinusoids q[t][j] = A_j sin(2 pi f_j t dt + phi_j) on the toy
// arm. Bodies are the link tips; the last tip is the single "foot" and is
// marked in contact for every frame.
inline MotionClip SynthMotion(const SynthMotionSpec& spec) {
  const int J = spec.n_joints;
  if (J < 1) throw ArgumentError("synth: n_joints must be >= 1");
  if (!(spec.fps > 0.0)) throw ArgumentError("synth: fps must be positive");
  const int T = static_cast<int>(std::lround(spec.duration * spec.fps));
  if (T < 2) throw ArgumentError("synth: duration * fps must give at least 2 frames");
  auto per_joint = [J](const std::vector<double>& v, double fallback,
                       const char* what) {
    if (v.empty()) return std::vector<double>(J, fallback);
    if (static_cast<int>(v.size()) != J) {
      throw DimensionError(std::string("synth: ") + what + " must have one entry per joint");
    }
    for (double x : v) {
      if (!std::isfinite(x)) throw ArgumentError(std::string("synth: non-finite ") + what);
    }
    return v;
  };
  const auto amp = per_joint(spec.amplitude, 0.0, "amplitude");
  const auto freq = per_joint(spec.frequency, 0.0, "frequency");
  const auto phase = per_joint(spec.phase, 0.0, "phase");
  ArmGeometry arm{per_joint(spec.link_lengths, 0.3, "link_lengths"), spec.base_height};

  MotionClip clip;
  clip.fps = spec.fps;
  for (int j = 0; j < J; ++j) clip.joint_names.push_back("joint" + std::to_string(j));
  clip.q.resize(T, J);
  const double dt = 1.0 / spec.fps;
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < J; ++j) {
      clip.q(t, j) = amp[j] * std::sin(2.0 * std::numbers::pi * freq[j] * (t * dt) + phase[j]);
    }
  }
  clip.base_pos = Eigen::MatrixXd::Zero(T, 3);
  clip.base_quat = Eigen::MatrixXd::Zero(T, 4);
  clip.base_quat.col(0).setOnes();
  clip.body_pos.resize(T);
  for (int t = 0; t < T; ++t) {
    clip.body_pos[t] = ArmForwardKinematics(arm, clip.q.row(t).transpose());
  }
  // The arm is bolted to its base: one permanently closed contact and no feet,
  // so a still arm never counts as airborne.
  clip.contacts = ContactMatrix::Constant(T, 1, true);
  clip.feet_indices.clear();
  return clip;
}

}  // namespace flowtrack
