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


#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "flowtrack/flow.hpp"
#include "test_util.hpp"

namespace flowtrack {
namespace {

using testing::ScratchDir;

VelocityFieldConfig SmallConfig(int action_dim = 2, int obs_dim = 3) {
  VelocityFieldConfig c;
  c.action_dim = action_dim;
  c.obs_dim = obs_dim;
  c.time_embed_dim = 4;
  c.hidden = {6};
  return c;
}

FmBatch RandomBatch(Rng& rng, int rows, int obs_dim, int action_dim) {
  std::normal_distribution<double> n;
  FmBatch b{Eigen::MatrixXd(rows, obs_dim), Eigen::MatrixXd(rows, action_dim)};
  b.observations = b.observations.unaryExpr([&](double) { return n(rng); });
  b.expert_actions = b.expert_actions.unaryExpr([&](double) { return n(rng); });
  return b;
}

// Central differences on every parameter.
double MaxGradRelError(VelocityFieldNet net, const FmBatch& batch, const FmNoise& noise) {
  const Eigen::VectorXd analytic = FmLossAndGrad(net, batch, noise).grad;
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < net.mlp().param_count(); ++i) {
    const double keep = net.mlp().params()[i];
    net.mlp().params()[i] = keep + h;
    const double up = FmLossAndGrad(net, batch, noise).loss;
    net.mlp().params()[i] = keep - h;
    const double down = FmLossAndGrad(net, batch, noise).loss;
    net.mlp().params()[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

TEST(VelocityField, ZeroNetGivesZero) {
  const VelocityFieldNet net = VelocityFieldNet::Zero(SmallConfig());
  const Eigen::VectorXd v = net.Forward(Eigen::Vector2d(0.4, -1.0), 0.3, Eigen::Vector3d(1, 2, 3));
  EXPECT_TRUE(v.isZero(0.0));
}

TEST(VelocityField, IdentityOnActionBlock) {
  VelocityFieldConfig c = SmallConfig();
  c.hidden = {};
  VelocityFieldNet net = VelocityFieldNet::Zero(c);
  net.mlp().weight(0).block(0, 0, 2, 2).setIdentity();
  const Eigen::Vector2d a(0.4, -1.5);
  EXPECT_EQ(net.Forward(a, 0.7, Eigen::Vector3d(9, 9, 9)), a);
}

TEST(VelocityField, DimensionMismatch) {
  const VelocityFieldNet net = VelocityFieldNet::Zero(SmallConfig());
  EXPECT_THROW(net.Forward(Eigen::Vector3d::Zero(), 0.5, Eigen::Vector3d::Zero()), DimensionError);
  EXPECT_THROW(net.Forward(Eigen::Vector2d::Zero(), 0.5, Eigen::Vector2d::Zero()), DimensionError);
}

TEST(VelocityField, Deterministic) {
  Rng a(3), b(3);
  const VelocityFieldNet n1 = VelocityFieldNet::Random(SmallConfig(), a);
  const VelocityFieldNet n2 = VelocityFieldNet::Random(SmallConfig(), b);
  const Eigen::Vector2d x(0.1, 0.2);
  const Eigen::Vector3d o(0.3, -0.4, 0.5);
  EXPECT_EQ(n1.Forward(x, 0.25, o), n2.Forward(x, 0.25, o));
}

TEST(FmLoss, PerfectPredictionIsZero) {
  // A constant field u equals the target when every sample shares eps - a = u.
  VelocityFieldNet net = VelocityFieldNet::Zero(SmallConfig());
  const Eigen::Vector2d u(0.5, -0.25);
  net.mlp().bias(net.mlp().layers() - 1) = u;
  Rng rng(1);
  FmBatch batch = RandomBatch(rng, 4, 3, 2);
  FmNoise noise{Eigen::Vector4d(0.1, 0.5, 0.9, 0.3), Eigen::MatrixXd(4, 2)};
  for (int b = 0; b < 4; ++b) noise.eps.row(b) = batch.expert_actions.row(b) + u.transpose();
  const FmLossResult r = FmLossAndGrad(net, batch, noise);
  EXPECT_NEAR(r.loss, 0.0, 1e-24);
  EXPECT_NEAR(r.grad.norm(), 0.0, 1e-12);
}

TEST(FmLoss, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const VelocityFieldNet net = VelocityFieldNet::Random(SmallConfig(), rng);
    const FmBatch batch = RandomBatch(rng, 4, 3, 2);
    const FmNoise noise = DrawFmNoise(4, 2, 1.5, 1.0, rng);
    EXPECT_LT(MaxGradRelError(net, batch, noise), 1e-4) << "seed " << seed;
  }
}

TEST(FmLoss, NonNegative) {
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const VelocityFieldNet net = VelocityFieldNet::Random(SmallConfig(), rng);
    EXPECT_GE(FmLossAndGrad(net, RandomBatch(rng, 5, 3, 2), rng).loss, 0.0);
  }
}

TEST(FmLoss, EmptyBatchRejected) {
  const VelocityFieldNet net = VelocityFieldNet::Zero(SmallConfig());
  FmBatch empty{Eigen::MatrixXd(0, 3), Eigen::MatrixXd(0, 2)};
  Rng rng(0);
  EXPECT_THROW(FmLossAndGrad(net, empty, rng), ArgumentError);
}

TEST(Timestep, UniformMean) {
  Rng rng(11);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double t = SampleTimestep(rng, 1.0, 1.0);
    ASSERT_GE(t, 0.0);
    ASSERT_LE(t, 1.0);
    sum += t;
  }
  EXPECT_NEAR(sum / 100000, 0.5, 0.01);
}

TEST(Timestep, BetaTwoTwoVariance) {
  Rng rng(12);
  const int n = 100000;
  std::vector<double> xs(n);
  double mean = 0.0;
  for (double& x : xs) mean += (x = SampleTimestep(rng, 2.0, 2.0));
  mean /= n;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n - 1;
  EXPECT_NEAR(var, 1.0 / 20.0, 0.1 / 20.0);
}

TEST(Timestep, RejectsBadShape) {
  Rng rng(0);
  EXPECT_THROW(SampleTimestep(rng, 0.0, 1.0), ArgumentError);
  EXPECT_THROW(SampleTimestep(rng, 1.0, -2.0), ArgumentError);
}

TEST(Sampler, ConstantFieldIsExact) {
  VelocityFieldNet net = VelocityFieldNet::Zero(SmallConfig());
  const Eigen::Vector2d u(0.3, -1.7);
  net.mlp().bias(net.mlp().layers() - 1) = u;
  const Eigen::Vector2d x1(0.123456789, 2.5);
  for (int d : {1, 2, 3, 5, 7, 100}) {
    const Eigen::VectorXd x0 = EulerIntegrate(net, Eigen::Vector3d::Zero(), x1, d);
    EXPECT_EQ(x0[0], x1[0] - u[0]) << d;
    EXPECT_EQ(x0[1], x1[1] - u[1]) << d;
  }
}

TEST(Sampler, LinearFieldMatchesOde) {
  VelocityFieldConfig c = SmallConfig();
  c.hidden = {};
  VelocityFieldNet net = VelocityFieldNet::Zero(c);
  net.mlp().weight(0).block(0, 0, 2, 2).setIdentity();
  const Eigen::Vector2d x1(1.3, -0.6);
  const Eigen::VectorXd x0 = EulerIntegrate(net, Eigen::Vector3d::Zero(), x1, 1000);
  const Eigen::VectorXd exact = std::exp(-1.0) * x1;
  for (int k = 0; k < 2; ++k) EXPECT_NEAR(x0[k], exact[k], 0.02 * std::abs(exact[k]));
  // Agrees with the literal recursion x <- x - v / D.
  Eigen::VectorXd x = x1;
  for (int k = 0; k < 1000; ++k) x -= x / 1000.0;
  EXPECT_NEAR((x0 - x).norm(), 0.0, 1e-12);
}

TEST(Sampler, SeededDeterminism) {
  Rng init(5);
  const VelocityFieldNet net = VelocityFieldNet::Random(SmallConfig(), init);
  Rng a(99), b(99);
  const Eigen::Vector3d obs(0.1, 0.2, 0.3);
  EXPECT_EQ(EulerSample(net, obs, 5, a), EulerSample(net, obs, 5, b));
  EXPECT_THROW(EulerIntegrate(net, obs, Eigen::Vector2d::Zero(), 0), ArgumentError);
}

TEST(Sampler, ConvergesOnSinglePair) {
  VelocityFieldConfig c = SmallConfig(1, 1);
  c.time_embed_dim = 4;
  c.hidden = {32, 32};
  c.beta_alpha = 1.0;
  Rng rng(21);
  VelocityFieldNet net = VelocityFieldNet::Random(c, rng);
  FmBatch batch{Eigen::MatrixXd::Constant(64, 1, 0.5), Eigen::MatrixXd::Constant(64, 1, 0.6)};
  AdamState st;
  const int iters = 20000;
  for (int i = 0; i < iters; ++i) {
    const FmLossResult r = FmLossAndGrad(net, batch, rng);
    const double lr = 3e-3 * 0.5 * (1.0 + std::cos(std::numbers::pi * i / iters)) + 1e-6;
    AdamStep(net.mlp().params(), r.grad, st, AdamCfg{lr});
  }
  auto mean_error = [&](int d) {
    Rng s(4);
    double acc = 0.0;
    for (int i = 0; i < 400; ++i) {
      acc += std::abs(EulerSample(net, Eigen::VectorXd::Constant(1, 0.5), d, s)[0] - 0.6);
    }
    return acc / 400;
  };
  const double e1 = mean_error(1), e5 = mean_error(5), e100 = mean_error(100);
  EXPECT_LT(e5, e1);
  // The field (x - a) / t is singular at t = 0, so the finest grid pays for
  // residual fit error near the origin. Allow a small absolute margin.
  EXPECT_LE(e100, e5 + 0.005);
  EXPECT_LT(e100, 0.01);
}

TEST(Sampler, SinglePairLossDropsBelowThreshold) {
  VelocityFieldConfig c = SmallConfig(1, 1);
  c.hidden = {32, 32};
  Rng rng(22);
  VelocityFieldNet net = VelocityFieldNet::Random(c, rng);
  // Fixed (t, eps) pair so the loss can be driven to zero.
  FmBatch batch{Eigen::MatrixXd::Constant(1, 1, 0.2), Eigen::MatrixXd::Constant(1, 1, 0.7)};
  const FmNoise noise{Eigen::VectorXd::Constant(1, 0.6), Eigen::MatrixXd::Constant(1, 1, -0.3)};
  AdamState st;
  double loss = 1.0;
  for (int i = 0; i < 2000 && loss >= 1e-3; ++i) {
    const FmLossResult r = FmLossAndGrad(net, batch, noise);
    loss = r.loss;
    AdamStep(net.mlp().params(), r.grad, st, AdamCfg{1e-2});
  }
  EXPECT_LT(loss, 1e-3);
}

TEST(Adam, ZeroGradientKeepsParams) {
  Eigen::VectorXd p = Eigen::VectorXd::LinSpaced(5, -1.0, 1.0);
  const Eigen::VectorXd before = p;
  AdamState st;
  AdamStep(p, Eigen::VectorXd::Zero(5), st, AdamCfg{});
  EXPECT_EQ(p, before);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(3);
  AdamState st;
  AdamStep(p, Eigen::Vector3d(2.0, -0.5, 1e-3), st, AdamCfg{0.01});
  EXPECT_NEAR(p[0], -0.01, 1e-8);
  EXPECT_NEAR(p[1], 0.01, 1e-8);
  EXPECT_NEAR(p[2], -0.01, 1e-7);
}

TEST(Adam, QuadraticBowlDecreases) {
  Eigen::VectorXd p = Eigen::Vector2d(3.0, -2.0);
  AdamState st;
  double prev = p.squaredNorm();
  for (int i = 0; i < 200; ++i) {
    AdamStep(p, 2.0 * p, st, AdamCfg{1e-3});
    const double now = p.squaredNorm();
    ASSERT_LT(now, prev);
    prev = now;
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = ScratchDir("policy_roundtrip");
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    VelocityFieldConfig c = SmallConfig(2 + seed % 2, 4 + seed);
    c.beta_alpha = 1.25 + seed;
    const VelocityFieldNet net = VelocityFieldNet::Random(c, rng);
    SavePolicy(net, dir / "p.json");
    const VelocityFieldNet back = LoadPolicy(dir / "p.json");
    EXPECT_EQ(back.mlp().params(), net.mlp().params());
    EXPECT_EQ(back.mlp().sizes(), net.mlp().sizes());
    EXPECT_EQ(back.frequencies(), net.frequencies());
    EXPECT_EQ(back.beta_alpha(), net.beta_alpha());
  }
}

TEST(Checkpoint, CorruptedShapeRejected) {
  Rng rng(1);
  const VelocityFieldNet net = VelocityFieldNet::Random(SmallConfig(), rng);
  auto j = nlohmann::json::parse(PolicyToJson(net).dump());
  j["layer_shapes"][1] = 7;
  EXPECT_THROW(PolicyFromJson(j), CheckpointError);
  j = nlohmann::json::parse(PolicyToJson(net).dump());
  j["params"].erase(0);
  EXPECT_THROW(PolicyFromJson(j), CheckpointError);
  j = nlohmann::json::parse(PolicyToJson(net).dump());
  j.erase("layer_shapes");
  EXPECT_THROW(PolicyFromJson(j), CheckpointError);
}

TEST(Checkpoint, UnknownVersionRejected) {
  Rng rng(1);
  auto j = nlohmann::json::parse(PolicyToJson(VelocityFieldNet::Random(SmallConfig(), rng)).dump());
  j["version"] = 999;
  EXPECT_THROW(PolicyFromJson(j), CheckpointError);
}

TEST(Checkpoint, GarbageFileRejected) {
  const auto dir = ScratchDir("policy_garbage");
  WriteFileAtomic(dir / "bad.json", "{not json");
  EXPECT_THROW(LoadPolicy(dir / "bad.json"), CheckpointError);
}

}  // namespace
}  // namespace flowtrack
