// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Coarse pose model: a perceptron mapping a global image embedding to a
// diagonal Gaussian mixture over camera poses (translation and axis-angle
// rotation, both of the camera-to-world transform).

#pragma once

#include "spine/common.hpp"
#include "spine/geometry.hpp"
#include "spine/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace spine {

using Vec6 = Eigen::Matrix<double, 6, 1>;

/// t (3) followed by the canonical rotation log (3).
inline Vec6 pose_to_vec6(const PoseSE3& p) {
  Vec6 v;
  v << p.translation, log_so3(p.rotation).r;
  return v;
}

inline PoseSE3 vec6_to_pose(const Vec6& v) {
  return {exp_so3(Vec3(v.tail<3>())), v.head<3>()};
}

struct PoseComponent {
  double weight = 0.0;
  Vec6 mean = Vec6::Zero();
  Vec6 variance = Vec6::Ones();
};

struct PoseDistribution {
  std::vector<PoseComponent> components;

  void validate() const {
    require(!components.empty(), "pose distribution: no components");
    double s = 0.0;
    for (const auto& c : components) {
      require(c.weight >= 0.0, "pose distribution: negative weight");
      require((c.variance.array() > 0.0).all(), "pose distribution: non-positive variance");
      s += c.weight;
    }
    require(std::abs(s - 1.0) < 1e-9, "pose distribution: weights do not sum to one");
  }
};

/// Highest-weight component (lowest index on ties), mapped through exp_so3.
inline PoseSE3 coarse_mode(const PoseDistribution& d) {
  require(!d.components.empty(), "coarse_mode: empty distribution");
  std::size_t best = 0;
  for (std::size_t k = 1; k < d.components.size(); ++k)
    if (d.components[k].weight > d.components[best].weight) best = k;
  return vec6_to_pose(d.components[best].mean);
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct InverseModelConfig {
  int embedding_dim = 64;
  int hidden = 128;
  int components = 1;
};

inline constexpr int kComponentWidth = 13;  // logit, 6 means, 6 variances
/// Added to softplus variances (normalized units) to keep the likelihood bounded.
inline constexpr double kVarianceFloor = 1e-6;

/// Network plus fixed affine normalizations of input and pose output. A fresh
/// model has identity normalizations.
struct InverseModelParams {
  InverseModelConfig config;
  nn::Mlp net;
  VecX input_mean;
  VecX input_scale;
  Vec6 output_mean = Vec6::Zero();
  Vec6 output_scale = Vec6::Ones();

  static InverseModelParams init(const InverseModelConfig& cfg, std::uint64_t seed) {
    require(cfg.embedding_dim >= 1 && cfg.hidden >= 1 && cfg.components >= 1,
            "inverse model: dimensions must be positive");
    Rng rng(seed);
    InverseModelParams p{cfg,
                         nn::Mlp::glorot({cfg.embedding_dim, cfg.hidden, cfg.hidden,
                                          cfg.components * kComponentWidth},
                                         rng),
                         VecX::Zero(cfg.embedding_dim), VecX::Ones(cfg.embedding_dim)};
    return p;
  }

  /// Throws InvalidArgument when the network or normalization shapes
  /// disagree with `config`.
  void validate() const {
    require(!net.layers.empty() && net.in() == config.embedding_dim &&
                net.out() == config.components * kComponentWidth &&
                input_mean.size() == config.embedding_dim &&
                input_scale.size() == config.embedding_dim,
            "inverse model: parameters do not match config");
  }

  VecX normalize_input(const VecX& e) const {
    return ((e - input_mean).array() / input_scale.array()).matrix();
  }
};

namespace detail {

/// Raw per-component outputs in normalized pose units.
struct MixtureOutput {
  VecX logits;
  std::vector<Vec6> mean;
  std::vector<Vec6> pre_var;
};

inline MixtureOutput split_output(const VecX& out, int k) {
  MixtureOutput m{VecX(k), std::vector<Vec6>(k), std::vector<Vec6>(k)};
  for (int c = 0; c < k; ++c) {
    const int o = c * kComponentWidth;
    m.logits[c] = out[o];
    m.mean[c] = out.segment<6>(o + 1);
    m.pre_var[c] = out.segment<6>(o + 7);
  }
  return m;
}

inline VecX softmax(const VecX& z) {
  const VecX e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

}  // namespace detail

/// Forward pass. Rotation blocks of the means are re-canonicalized so that
/// ||r|| <= pi; variances are softplus outputs scaled to pose units.
inline PoseDistribution coarse_predict(const InverseModelParams& m, const VecX& embedding) {
  m.validate();
  require(embedding.size() == m.config.embedding_dim, "coarse_predict: embedding dimension mismatch");
  const auto o = detail::split_output(m.net.forward(m.normalize_input(embedding)),
                                      m.config.components);
  const VecX w = detail::softmax(o.logits);
  PoseDistribution d;
  for (int c = 0; c < m.config.components; ++c) {
    PoseComponent pc;
    pc.weight = w[c];
    pc.mean = m.output_mean + m.output_scale.cwiseProduct(o.mean[c]);
    pc.mean.tail<3>() = log_so3(exp_so3(Vec3(pc.mean.tail<3>()))).r;
    for (int j = 0; j < 6; ++j)
      pc.variance[j] =
          (softplus(o.pre_var[c][j]) + kVarianceFloor) * m.output_scale[j] * m.output_scale[j];
    d.components.push_back(pc);
  }
  return d;
}

struct InverseSample {
  VecX embedding;
  PoseSE3 pose;
};

/// Chooses between r and its antipodal representation, whichever lies
/// closer to the current prediction, so the target never jumps across the
/// pi boundary.
inline Vec3 aligned_rotation_target(const Vec3& target, const Vec3& prediction) {
  const Vec3 alt = antipodal_axis_angle(target);
  return (alt - prediction).squaredNorm() < (target - prediction).squaredNorm() ? alt : target;
}

/// Per-sample loss and parameter gradient (accumulated into `grad`). K = 1
/// uses the squared error of the mean in normalized units; K > 1 uses the
/// mixture negative log-likelihood.
inline double inverse_sample_loss(const InverseModelParams& m, const InverseSample& s,
                                  nn::Mlp* grad) {
  const int k = m.config.components;
  nn::Mlp::Cache cache;
  const VecX out = m.net.forward(m.normalize_input(s.embedding), grad ? &cache : nullptr);
  const auto o = detail::split_output(out, k);
  const Vec6 truth = pose_to_vec6(s.pose);

  // Normalized target for one component, its rotation aligned with that
  // component's current mean.
  auto target_for = [&](int c) -> Vec6 {
    const Vec6 pred = m.output_mean + m.output_scale.cwiseProduct(o.mean[c]);
    Vec6 t = truth;
    t.tail<3>() = aligned_rotation_target(truth.tail<3>(), pred.tail<3>());
    return (t - m.output_mean).cwiseQuotient(m.output_scale);
  };

  VecX dout = VecX::Zero(out.size());
  double loss = 0.0;
  if (k == 1) {
    const Vec6 r = o.mean[0] - target_for(0);
    loss = r.squaredNorm();
    dout.segment<6>(1) = 2.0 * r;
  } else {
    const double log2pi = std::log(2.0 * std::numbers::pi);
    const VecX w = detail::softmax(o.logits);
    VecX logp(k);
    std::vector<Vec6> var(static_cast<std::size_t>(k)), err(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
      err[c] = target_for(c) - o.mean[c];
      double lp = std::log(w[c]);
      for (int j = 0; j < 6; ++j) {
        var[c][j] = softplus(o.pre_var[c][j]) + kVarianceFloor;
        lp -= 0.5 * (err[c][j] * err[c][j] / var[c][j] + std::log(var[c][j]) + log2pi);
      }
      logp[c] = lp;
    }
    const double mx = logp.maxCoeff();
    const double lse = mx + std::log((logp.array() - mx).exp().sum());
    loss = -lse;
    const VecX resp = (logp.array() - lse).exp().matrix();
    for (int c = 0; c < k; ++c) {
      const int off = c * kComponentWidth;
      dout[off] = w[c] - resp[c];
      for (int j = 0; j < 6; ++j) {
        const double e = err[c][j], v = var[c][j];
        dout[off + 1 + j] = -resp[c] * e / v;
        dout[off + 7 + j] = 0.5 * resp[c] * (1.0 / v - e * e / (v * v)) * sigmoid(o.pre_var[c][j]);
      }
    }
  }
  if (grad) m.net.backward(cache, dout, *grad);
  return loss;
}

/// Mean loss over a batch; gradient of that mean accumulated into `grad`.
inline double inverse_loss_gradient(const InverseModelParams& m,
                                    std::span<const InverseSample> batch, nn::Mlp* grad) {
  require(!batch.empty(), "inverse loss: empty batch");
  nn::Mlp local = m.net.zeros_like();
  double total = 0.0;
  for (const auto& s : batch) total += inverse_sample_loss(m, s, grad ? &local : nullptr);
  const double inv = 1.0 / static_cast<double>(batch.size());
  if (grad) {
    for (std::size_t l = 0; l < local.layers.size(); ++l) {
      grad->layers[l].weight += inv * local.layers[l].weight;
      grad->layers[l].bias += inv * local.layers[l].bias;
    }
  }
  return total * inv;
}

struct InverseTrainConfig {
  int iterations = 1000;
  double learning_rate = 3e-3;
  /// 0 means full batch.
  int batch_size = 0;
  std::uint64_t seed = 0;
};

struct InverseTrainResult {
  InverseModelParams params;
  std::vector<double> loss_trace;
};

/// Fits input and output normalizations from the data, then runs Adam.
inline InverseTrainResult train_inverse_model(std::span<const InverseSample> data,
                                              const InverseModelConfig& mcfg,
                                              const InverseTrainConfig& cfg) {
  require(static_cast<int>(data.size()) >= mcfg.components,
          "train_inverse_model: need at least K training pairs");
  require(cfg.iterations >= 1 && cfg.learning_rate > 0.0,
          "train_inverse_model: iterations and learning rate must be positive");
  for (const auto& s : data)
    require(s.embedding.size() == mcfg.embedding_dim,
            "train_inverse_model: embedding dimension mismatch");

  InverseTrainResult res{InverseModelParams::init(mcfg, derive_seed(cfg.seed, 1)), {}};
  auto& p = res.params;
  const double n = static_cast<double>(data.size());
  VecX mean = VecX::Zero(mcfg.embedding_dim), sq = VecX::Zero(mcfg.embedding_dim);
  Vec6 tmean = Vec6::Zero(), tsq = Vec6::Zero();
  for (const auto& s : data) {
    mean += s.embedding;
    sq += s.embedding.cwiseAbs2();
    const Vec6 t = pose_to_vec6(s.pose);
    tmean += t;
    tsq += t.cwiseAbs2();
  }
  mean /= n;
  tmean /= n;
  p.input_mean = mean;
  // One shared input scale (RMS of the per-dimension deviations): scaling
  // each dimension separately inflates near-constant embedding directions.
  const VecX sd = (sq / n - mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  p.input_scale = VecX::Constant(mcfg.embedding_dim,
                                 std::max(std::sqrt(sd.squaredNorm() / sd.size()), 1e-8));
  p.output_mean = tmean;
  p.output_scale = (tsq / n - tmean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-3);

  nn::Mlp grad = p.net.zeros_like();
  std::vector<std::span<double>> pblocks;
  std::vector<std::span<const double>> gblocks;
  p.net.visit([&](double* d, std::size_t k) { pblocks.emplace_back(d, k); });
  grad.visit([&](const double* d, std::size_t k) { gblocks.emplace_back(d, k); });
  std::size_t total = 0;
  for (const auto& b : pblocks) total += b.size();
  nn::Adam adam(total, {cfg.learning_rate, 0.9, 0.999, 1e-8});

  const bool full = cfg.batch_size <= 0 || cfg.batch_size >= static_cast<int>(data.size());
  Rng rng(derive_seed(cfg.seed, 2));
  std::vector<InverseSample> batch;
  res.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations));
  for (int it = 0; it < cfg.iterations; ++it) {
    std::span<const InverseSample> b = data;
    if (!full) {
      batch.clear();
      for (int i = 0; i < cfg.batch_size; ++i) batch.push_back(data[rng.index(data.size())]);
      b = batch;
    }
    grad.set_zero();
    const double loss = inverse_loss_gradient(p, b, &grad);
    res.loss_trace.push_back(loss);
    if (!std::isfinite(loss))
      throw TrainingFailure("train_inverse_model: loss diverged at iteration " +
                                std::to_string(it),
                            res.loss_trace);
    adam.step(pblocks, gblocks);
  }
  return res;
}

}  // namespace spine
