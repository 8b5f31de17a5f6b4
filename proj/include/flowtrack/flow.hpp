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

// Flow-matching policy built on a feedforward velocity field v(a_t, t, obs)
// and its straight-path regression loss.
//
// Conventions: batches are column-major, one sample per column, everywhere
// inside this file. FmBatch keeps the row-per-sample layout of its callers.

#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowtrack/common.hpp"
#include "json.hpp"

namespace flowtrack {

// ---------------------------------------------------------------------------
// Multilayer perceptron with SiLU hidden activations and a linear output.
// Parameters live in one flat vector: for each layer, the (out x in)
// column-major weight followed by the bias.

class Mlp {
 public:
  struct Tape {
    std::vector<Eigen::MatrixXd> inputs;  // activation entering layer l
    std::vector<Eigen::MatrixXd> pre;     // pre-activation of layer l
  };

  Mlp() = default;

  explicit Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw ArgumentError("mlp: need at least input and output sizes");
    Eigen::Index total = 0;
    for (size_t l = 0; l + 1 < sizes_.size(); ++l) {
      if (sizes_[l] <= 0 || sizes_[l + 1] <= 0) throw ArgumentError("mlp: layer sizes must be positive");
      offsets_.push_back(total);
      total += static_cast<Eigen::Index>(sizes_[l + 1]) * (sizes_[l] + 1);
    }
    params_ = Eigen::VectorXd::Zero(total);
  }

  // Glorot-uniform weights, zero biases.
  static Mlp Glorot(std::vector<int> sizes, Rng& rng) {
    Mlp m(std::move(sizes));
    for (int l = 0; l < m.layers(); ++l) {
      const double limit = std::sqrt(6.0 / (m.sizes_[l] + m.sizes_[l + 1]));
      std::uniform_real_distribution<double> u(-limit, limit);
      auto w = m.weight(l);
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = u(rng);
      }
    }
    return m;
  }

  int layers() const { return static_cast<int>(sizes_.size()) - 1; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }

  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }
  Eigen::Index param_count() const { return params_.size(); }

  Eigen::Map<Eigen::MatrixXd> weight(int l) {
    return {params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<const Eigen::MatrixXd> weight(int l) const {
    return {params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<Eigen::VectorXd> bias(int l) {
    return {params_.data() + offsets_[l] + sizes_[l + 1] * sizes_[l], sizes_[l + 1]};
  }
  Eigen::Map<const Eigen::VectorXd> bias(int l) const {
    return {params_.data() + offsets_[l] + sizes_[l + 1] * sizes_[l], sizes_[l + 1]};
  }

  Eigen::MatrixXd Forward(const Eigen::MatrixXd& x, Tape* tape = nullptr) const {
    if (x.rows() != input_dim()) throw DimensionError("mlp: input dimension mismatch");
    if (tape) {
      tape->inputs.clear();
      tape->pre.clear();
    }
    Eigen::MatrixXd a = x;
    for (int l = 0; l < layers(); ++l) {
      Eigen::MatrixXd z = weight(l) * a;
      z.colwise() += bias(l);
      if (tape) {
        tape->inputs.push_back(std::move(a));
        tape->pre.push_back(z);
      }
      a = l + 1 < layers() ? Silu(z) : std::move(z);
    }
    return a;
  }

  // Gradient of sum(d_out .* output) with respect to the flat parameters.
  Eigen::VectorXd Backward(const Tape& tape, const Eigen::MatrixXd& d_out,
                           Eigen::MatrixXd* d_input = nullptr) const {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(param_count());
    Eigen::MatrixXd g = d_out;
    for (int l = layers() - 1; l >= 0; --l) {
      if (l + 1 < layers()) g = g.cwiseProduct(SiluGrad(tape.pre[l]));
      Eigen::Map<Eigen::MatrixXd> dw(grad.data() + offsets_[l], sizes_[l + 1], sizes_[l]);
      Eigen::Map<Eigen::VectorXd> db(grad.data() + offsets_[l] + sizes_[l + 1] * sizes_[l],
                                     sizes_[l + 1]);
      dw.noalias() = g * tape.inputs[l].transpose();
      db = g.rowwise().sum();
      if (l > 0 || d_input) g = weight(l).transpose() * g;
    }
    if (d_input) *d_input = std::move(g);
    return grad;
  }

  static Eigen::MatrixXd Silu(const Eigen::MatrixXd& z) {
    return z.unaryExpr([](double x) { return x * Sigmoid(x); });
  }
  static Eigen::MatrixXd SiluGrad(const Eigen::MatrixXd& z) {
    return z.unaryExpr([](double x) {
      const double s = Sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    });
  }

 private:
  static double Sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  std::vector<int> sizes_;
  std::vector<Eigen::Index> offsets_;
  Eigen::VectorXd params_;
};

inline nlohmann::ordered_json MlpToJson(const Mlp& mlp) {
  nlohmann::ordered_json j;
  j["layer_shapes"] = mlp.sizes();
  j["activation"] = "silu";
  j["param_count"] = mlp.param_count();
  j["params"] = std::vector<double>(mlp.params().data(),
                                    mlp.params().data() + mlp.param_count());
  return j;
}

inline Mlp MlpFromJson(const nlohmann::json& j) {
  try {
    const auto shapes = j.at("layer_shapes").get<std::vector<int>>();
    if (j.at("activation").get<std::string>() != "silu") {
      throw CheckpointError("checkpoint: unsupported activation");
    }
    const auto count = j.at("param_count").get<long long>();
    const auto& params = j.at("params");
    if (!params.is_array()) throw CheckpointError("checkpoint: params must be an array");
    Mlp mlp(shapes);
    if (mlp.param_count() != count || static_cast<long long>(params.size()) != count) {
      throw CheckpointError("checkpoint: parameter count does not match layer shapes");
    }
    for (Eigen::Index i = 0; i < count; ++i) {
      if (!params[i].is_number()) throw CheckpointError("checkpoint: non-numeric parameter");
      mlp.params()[i] = params[i].get<double>();
    }
    if (!mlp.params().allFinite()) throw CheckpointError("checkpoint: non-finite parameter");
    return mlp;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ArgumentError& e) {
    throw CheckpointError(std::string("checkpoint: bad layer shapes: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Velocity field v(a_t, t, obs).

struct VelocityFieldConfig {
  int action_dim = 1;
  int obs_dim = 1;
  int time_embed_dim = 16;  // even; sin/cos pairs
  std::vector<int> hidden = {256, 256};
  // Beta(alpha, beta) for training timesteps.
  double beta_alpha = 1.5;
  double beta_beta = 1.0;
};

class VelocityFieldNet {
 public:
  VelocityFieldNet() = default;

  // Zero weights: the field is identically zero.
  static VelocityFieldNet Zero(const VelocityFieldConfig& cfg) {
    VelocityFieldNet net(cfg);
    net.mlp_ = Mlp(net.LayerShapes(cfg));
    return net;
  }

  static VelocityFieldNet Random(const VelocityFieldConfig& cfg, Rng& rng) {
    VelocityFieldNet net(cfg);
    net.mlp_ = Mlp::Glorot(net.LayerShapes(cfg), rng);
    return net;
  }

  int action_dim() const { return action_dim_; }
  int obs_dim() const { return obs_dim_; }
  int time_embed_dim() const { return static_cast<int>(2 * frequencies_.size()); }
  const std::vector<double>& frequencies() const { return frequencies_; }
  double beta_alpha() const { return beta_alpha_; }
  double beta_beta() const { return beta_beta_; }
  Mlp& mlp() { return mlp_; }
  const Mlp& mlp() const { return mlp_; }

  // Column-wise input [a_t; sin(w t); cos(w t); obs].
  Eigen::MatrixXd AssembleInput(const Eigen::MatrixXd& a_t, const Eigen::VectorXd& t,
                                const Eigen::MatrixXd& obs) const {
    if (a_t.rows() != action_dim_ || obs.rows() != obs_dim_) {
      throw DimensionError("velocity field: action/observation dimension mismatch");
    }
    if (a_t.cols() != t.size() || obs.cols() != t.size()) {
      throw DimensionError("velocity field: batch size mismatch");
    }
    const int half = static_cast<int>(frequencies_.size());
    Eigen::MatrixXd in(action_dim_ + 2 * half + obs_dim_, t.size());
    in.topRows(action_dim_) = a_t;
    for (Eigen::Index b = 0; b < t.size(); ++b) {
      for (int k = 0; k < half; ++k) {
        in(action_dim_ + k, b) = std::sin(frequencies_[k] * t[b]);
        in(action_dim_ + half + k, b) = std::cos(frequencies_[k] * t[b]);
      }
    }
    in.bottomRows(obs_dim_) = obs;
    return in;
  }

  Eigen::MatrixXd ForwardBatch(const Eigen::MatrixXd& a_t, const Eigen::VectorXd& t,
                               const Eigen::MatrixXd& obs, Mlp::Tape* tape = nullptr) const {
    return mlp_.Forward(AssembleInput(a_t, t, obs), tape);
  }

  Eigen::VectorXd Forward(const Eigen::VectorXd& a_t, double t,
                          const Eigen::VectorXd& obs) const {
    return ForwardBatch(a_t, Eigen::VectorXd::Constant(1, t), obs).col(0);
  }

 private:
  explicit VelocityFieldNet(const VelocityFieldConfig& cfg)
      : action_dim_(cfg.action_dim),
        obs_dim_(cfg.obs_dim),
        beta_alpha_(cfg.beta_alpha),
        beta_beta_(cfg.beta_beta) {
    if (cfg.action_dim <= 0 || cfg.obs_dim < 0) throw ArgumentError("velocity field: bad dims");
    if (cfg.time_embed_dim < 0 || cfg.time_embed_dim % 2 != 0) {
      throw ArgumentError("velocity field: time_embed_dim must be even");
    }
    if (!(cfg.beta_alpha > 0.0) || !(cfg.beta_beta > 0.0)) {
      throw ArgumentError("velocity field: Beta shape parameters must be positive");
    }
    for (int k = 0; k < cfg.time_embed_dim / 2; ++k) frequencies_.push_back(std::ldexp(1.0, k));
  }

  std::vector<int> LayerShapes(const VelocityFieldConfig& cfg) const {
    std::vector<int> s{action_dim_ + cfg.time_embed_dim + obs_dim_};
    s.insert(s.end(), cfg.hidden.begin(), cfg.hidden.end());
    s.push_back(action_dim_);
    return s;
  }

  friend VelocityFieldNet PolicyFromJson(const nlohmann::json& j);

  int action_dim_ = 0;
  int obs_dim_ = 0;
  double beta_alpha_ = 1.5;
  double beta_beta_ = 1.0;
  std::vector<double> frequencies_;
  Mlp mlp_;
};

// ---------------------------------------------------------------------------
// Training objective.

// Rows are samples.
struct FmBatch {
  Eigen::MatrixXd observations;    // B x obs_dim
  Eigen::MatrixXd expert_actions;  // B x action_dim

  Eigen::Index size() const { return observations.rows(); }
};

// Per-sample flow time and Gaussian endpoint.
struct FmNoise {
  Eigen::VectorXd t;    // B
  Eigen::MatrixXd eps;  // B x action_dim
};

// Beta(alpha, beta) variate as X / (X + Y) with X ~ Gamma(alpha), Y ~ Gamma(beta).
inline double SampleTimestep(Rng& rng, double alpha, double beta) {
  if (!(alpha > 0.0) || !(beta > 0.0)) {
    throw ArgumentError("timestep: Beta shape parameters must be positive");
  }
  std::gamma_distribution<double> ga(alpha, 1.0), gb(beta, 1.0);
  for (;;) {
    const double x = ga(rng);
    const double y = gb(rng);
    if (x + y > 0.0) return x / (x + y);
  }
}

inline FmNoise DrawFmNoise(Eigen::Index batch, int action_dim, double alpha,
                           double beta, Rng& rng) {
  FmNoise n{Eigen::VectorXd(batch), Eigen::MatrixXd(batch, action_dim)};
  std::normal_distribution<double> normal;
  for (Eigen::Index b = 0; b < batch; ++b) {
    n.t[b] = SampleTimestep(rng, alpha, beta);
    for (int k = 0; k < action_dim; ++k) n.eps(b, k) = normal(rng);
  }
  return n;
}

struct FmLossResult {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

// mean_b || v(a_t, t, o) - (eps - a_expert) ||^2 with
// a_t = (1 - t) a_expert + t eps, and its exact gradient.
inline FmLossResult FmLossAndGrad(const VelocityFieldNet& net, const FmBatch& batch,
                                  const FmNoise& noise) {
  const Eigen::Index B = batch.size();
  if (B < 1) throw ArgumentError("fm loss: empty batch");
  if (batch.expert_actions.rows() != B || noise.t.size() != B || noise.eps.rows() != B) {
    throw DimensionError("fm loss: batch/noise size mismatch");
  }
  const Eigen::MatrixXd a = batch.expert_actions.transpose();
  const Eigen::MatrixXd eps = noise.eps.transpose();
  Eigen::MatrixXd a_t = eps;
  for (Eigen::Index b = 0; b < B; ++b) {
    a_t.col(b) = (1.0 - noise.t[b]) * a.col(b) + noise.t[b] * eps.col(b);
  }
  const Eigen::MatrixXd target = eps - a;
  Mlp::Tape tape;
  const Eigen::MatrixXd pred =
      net.ForwardBatch(a_t, noise.t, batch.observations.transpose(), &tape);
  const Eigen::MatrixXd diff = pred - target;
  FmLossResult r;
  r.loss = diff.squaredNorm() / B;
  r.grad = net.mlp().Backward(tape, (2.0 / B) * diff);
  return r;
}

// Draws fresh (t, eps) per sample, then evaluates the loss.
inline FmLossResult FmLossAndGrad(const VelocityFieldNet& net, const FmBatch& batch,
                                  Rng& rng) {
  const FmNoise noise = DrawFmNoise(batch.size(), net.action_dim(), net.beta_alpha(),
                                    net.beta_beta(), rng);
  return FmLossAndGrad(net, batch, noise);
}

// ---------------------------------------------------------------------------
// Sampling.

struct SamplerCfg {
  int steps = 5;  // D
  std::uint64_t seed = 0;
  double beta_alpha = 1.5;
  double beta_beta = 1.0;

  void Validate() const {
    if (steps < 1) throw ArgumentError("sampler: steps must be >= 1");
    if (!(beta_alpha > 0.0) || !(beta_beta > 0.0)) {
      throw ArgumentError("sampler: Beta shape parameters must be positive");
    }
  }
};

// Reverse-time Euler from t = 1 to t = 0 with step 1/D:
//   x_{t - 1/D} = x_t - v(x_t, t, obs) / D.
// The iterate is kept as x_1 - (k/D) * mean(v_0..v_{k-1}) with a running mean,
// which is algebraically the same recursion; a constant field therefore
// integrates to exactly x_1 - u for every D.
inline Eigen::VectorXd EulerIntegrate(const VelocityFieldNet& net,
                                      const Eigen::VectorXd& obs,
                                      const Eigen::VectorXd& x1, int steps) {
  if (steps < 1) throw ArgumentError("euler: steps must be >= 1");
  if (x1.size() != net.action_dim()) throw DimensionError("euler: x1 dimension mismatch");
  Eigen::VectorXd x = x1;
  Eigen::VectorXd mean_v = Eigen::VectorXd::Zero(x1.size());
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / steps;
    const Eigen::VectorXd v = net.Forward(x, t, obs);
    mean_v += (v - mean_v) / static_cast<double>(k + 1);
    x = x1 - (static_cast<double>(k + 1) / steps) * mean_v;
  }
  return x;
}

inline Eigen::VectorXd EulerSample(const VelocityFieldNet& net, const Eigen::VectorXd& obs,
                                   int steps, Rng& rng) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd x1(net.action_dim());
  for (Eigen::Index i = 0; i < x1.size(); ++i) x1[i] = normal(rng);
  return EulerIntegrate(net, obs, x1, steps);
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamCfg {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long long step = 0;
};

inline void AdamStep(Eigen::VectorXd& params, const Eigen::VectorXd& grads,
                     AdamState& state, const AdamCfg& cfg) {
  if (grads.size() != params.size()) throw DimensionError("adam: gradient size mismatch");
  if (state.m.size() != params.size()) {
    state.m = Eigen::VectorXd::Zero(params.size());
    state.v = Eigen::VectorXd::Zero(params.size());
    state.step = 0;
  }
  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  params.array() -= cfg.lr * (state.m.array() / c1) /
                    ((state.v.array() / c2).sqrt() + cfg.eps);
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::ordered_json PolicyToJson(const VelocityFieldNet& net) {
  nlohmann::ordered_json j;
  j["format"] = "flowtrack.velocity_field";
  j["version"] = kCheckpointVersion;
  j["action_dim"] = net.action_dim();
  j["obs_dim"] = net.obs_dim();
  j["time_embed_dim"] = net.time_embed_dim();
  j["time_frequencies"] = net.frequencies();
  j["alpha"] = net.beta_alpha();
  j["beta"] = net.beta_beta();
  const auto body = MlpToJson(net.mlp());
  for (const auto& [k, v] : body.items()) j[k] = v;
  return j;
}

inline VelocityFieldNet PolicyFromJson(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "flowtrack.velocity_field") {
      throw CheckpointError("checkpoint: not a velocity-field checkpoint");
    }
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    }
    VelocityFieldConfig cfg;
    cfg.action_dim = j.at("action_dim").get<int>();
    cfg.obs_dim = j.at("obs_dim").get<int>();
    cfg.time_embed_dim = j.at("time_embed_dim").get<int>();
    cfg.beta_alpha = j.at("alpha").get<double>();
    cfg.beta_beta = j.at("beta").get<double>();
    const auto freqs = j.at("time_frequencies").get<std::vector<double>>();
    VelocityFieldNet net(cfg);
    if (freqs.size() != net.frequencies_.size()) {
      throw CheckpointError("checkpoint: time embedding size mismatch");
    }
    net.frequencies_ = freqs;
    Mlp mlp = MlpFromJson(j);
    if (mlp.input_dim() != cfg.action_dim + cfg.time_embed_dim + cfg.obs_dim ||
        mlp.output_dim() != cfg.action_dim) {
      throw CheckpointError("checkpoint: layer shapes inconsistent with dimensions");
    }
    net.mlp_ = std::move(mlp);
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ArgumentError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
}

inline void SavePolicy(const VelocityFieldNet& net, const std::filesystem::path& path) {
  WriteFileAtomic(path, PolicyToJson(net).dump() + "\n");
}

inline VelocityFieldNet LoadPolicy(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ReadFile(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError("checkpoint: '" + path.string() + "' is not valid JSON");
  }
  return PolicyFromJson(j);
}

}  // namespace flowtrack
