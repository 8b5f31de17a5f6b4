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

#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "flowtrack/common.hpp"

namespace flowtrack {

// Planar serial arm moving in the world x-z plane. The base joint sits at
// (0, 0, base_height); joint angles are relative, so link k points along the
// absolute angle theta_k = q_0 + ... + q_k measured from +x towards +z.
// Body i is the distal tip of link i.
struct ArmGeometry {
  std::vector<double> lengths;
  double base_height = 1.0;

  int joints() const { return static_cast<int>(lengths.size()); }
};

inline Eigen::VectorXd AbsoluteAngles(const Eigen::Ref<const Eigen::VectorXd>& q) {
  Eigen::VectorXd theta(q.size());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    acc += q[i];
    theta[i] = acc;
  }
  return theta;
}

inline Points ArmForwardKinematics(const ArmGeometry& arm,
                                   const Eigen::Ref<const Eigen::VectorXd>& q) {
  if (q.size() != arm.joints()) {
    throw DimensionError("forward kinematics: joint count mismatch");
  }
  const Eigen::VectorXd theta = AbsoluteAngles(q);
  Points p(arm.joints(), 3);
  double x = 0.0, z = arm.base_height;
  for (int i = 0; i < arm.joints(); ++i) {
    x += arm.lengths[i] * std::cos(theta[i]);
    z += arm.lengths[i] * std::sin(theta[i]);
    p.row(i) << x, 0.0, z;
  }
  return p;
}

// Planar Jacobian of body i's (x, z) position with respect to q (2 x J).
inline Eigen::MatrixXd ArmBodyJacobian(const ArmGeometry& arm,
                                       const Eigen::VectorXd& theta, int body) {
  const int n = arm.joints();
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(2, n);
  // Column m collects the perpendicular directions of links m..body.
  double sx = 0.0, sz = 0.0;
  for (int k = body; k >= 0; --k) {
    sx += -arm.lengths[k] * std::sin(theta[k]);
    sz += arm.lengths[k] * std::cos(theta[k]);
    jac(0, k) = sx;
    jac(1, k) = sz;
  }
  return jac;
}

inline Points ArmBodyVelocities(const ArmGeometry& arm,
                                const Eigen::Ref<const Eigen::VectorXd>& q,
                                const Eigen::Ref<const Eigen::VectorXd>& qdot) {
  if (q.size() != arm.joints() || qdot.size() != arm.joints()) {
    throw DimensionError("body velocities: joint count mismatch");
  }
  const Eigen::VectorXd theta = AbsoluteAngles(q);
  Points v(arm.joints(), 3);
  for (int i = 0; i < arm.joints(); ++i) {
    const Eigen::Vector2d xz = ArmBodyJacobian(arm, theta, i) * qdot;
    v.row(i) << xz[0], 0.0, xz[1];
  }
  return v;
}

// Wraps an angle to [-pi, pi).
inline double WrapAngle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, kTwoPi);
  if (a < 0.0) a += kTwoPi;
  return a - std::numbers::pi;
}

}  // namespace flowtrack
