// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Semantic field distillation. A dense multi-resolution grid encodes a 3D
// point; two perceptron heads read the same encoding, one regressing the
// backbone (spatial) features and one the language features. Training
// minimizes a Frobenius plus negative-cosine loss against back-projected
// 2D features with exact hand-written gradients.

#pragma once

#include "spine/common.hpp"
#include "spine/features.hpp"
#include "spine/geometry.hpp"
#include "spine/nn.hpp"
#include "spine/scene.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace spine {

// ---------------------------------------------------------------------------
// Multi-resolution grid
// ---------------------------------------------------------------------------

struct GridConfig {
  std::vector<int> resolutions{2, 4, 8, 16};
  int features_per_level = 2;
  Aabb bounds;

  void validate() const {
    require(!resolutions.empty(), "grid: at least one level is required");
    require(resolutions.front() >= 1, "grid: resolutions must be positive");
    for (std::size_t i = 1; i < resolutions.size(); ++i)
      require(resolutions[i] > resolutions[i - 1], "grid: resolutions must be strictly increasing");
    require(features_per_level >= 1, "grid: features_per_level must be >= 1");
    require(bounds.valid(), "grid: invalid bounds");
  }
  int levels() const { return static_cast<int>(resolutions.size()); }
  int encoding_dim() const { return levels() * features_per_level; }
};

/// Dense vertex grids: level l stores (N_l + 1)^3 vertices with F values each.
struct MultiResGrid {
  GridConfig config;
  std::vector<VecX> values;

  static MultiResGrid zeros(const GridConfig& cfg) {
    cfg.validate();
    MultiResGrid g{cfg, {}};
    for (int n : cfg.resolutions) {
      const std::size_t verts = static_cast<std::size_t>(n + 1) * (n + 1) * (n + 1);
      g.values.push_back(VecX::Zero(static_cast<Eigen::Index>(verts * cfg.features_per_level)));
    }
    return g;
  }

  static MultiResGrid uniform(const GridConfig& cfg, double amplitude, Rng& rng) {
    MultiResGrid g = zeros(cfg);
    for (auto& v : g.values)
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-amplitude, amplitude);
    return g;
  }

  std::size_t vertex_index(int level, int ix, int iy, int iz) const {
    const std::size_t n1 = static_cast<std::size_t>(config.resolutions[level]) + 1;
    return (static_cast<std::size_t>(iz) * n1 + iy) * n1 + ix;
  }

  /// The 8 corners and trilinear weights of `x` on one level. `x` is
  /// clamped to the bounds first.
  struct Corners {
    std::array<std::size_t, 8> vertex;
    std::array<double, 8> weight;
  };

  Corners corners(int level, const Vec3& x) const {
    const int n = config.resolutions[level];
    const Vec3 ext = config.bounds.max - config.bounds.min;
    Corners c{};
    std::array<int, 3> i0{};
    std::array<double, 3> f{};
    for (int a = 0; a < 3; ++a) {
      double u = (x[a] - config.bounds.min[a]) / ext[a];
      u = std::clamp(u, 0.0, 1.0) * n;
      int i = static_cast<int>(std::floor(u));
      if (i >= n) i = n - 1;
      i0[a] = i;
      f[a] = u - i;
    }
    for (int k = 0; k < 8; ++k) {
      const int dx = k & 1, dy = (k >> 1) & 1, dz = (k >> 2) & 1;
      c.vertex[k] = vertex_index(level, i0[0] + dx, i0[1] + dy, i0[2] + dz);
      c.weight[k] = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) * (dz ? f[2] : 1.0 - f[2]);
    }
    return c;
  }

  /// Concatenation over levels of the trilinearly interpolated features.
  VecX encode(const Vec3& x) const {
    const int fdim = config.features_per_level;
    VecX out = VecX::Zero(config.encoding_dim());
    for (int l = 0; l < config.levels(); ++l) {
      const Corners c = corners(l, x);
      for (int k = 0; k < 8; ++k)
        for (int j = 0; j < fdim; ++j)
          out[l * fdim + j] += c.weight[k] * values[l][static_cast<Eigen::Index>(c.vertex[k] * fdim + j)];
    }
    return out;
  }

  /// Scatters d(loss)/d(encoding) back onto the vertex values of `grad`.
  void accumulate(const Vec3& x, const VecX& d_enc, MultiResGrid& grad) const {
    const int fdim = config.features_per_level;
    for (int l = 0; l < config.levels(); ++l) {
      const Corners c = corners(l, x);
      for (int k = 0; k < 8; ++k)
        for (int j = 0; j < fdim; ++j)
          grad.values[l][static_cast<Eigen::Index>(c.vertex[k] * fdim + j)] += c.weight[k] * d_enc[l * fdim + j];
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += static_cast<std::size_t>(v.size());
    return n;
  }
};

// ---------------------------------------------------------------------------
// Field parameters
// ---------------------------------------------------------------------------

struct FieldConfig {
  GridConfig grid;
  int hidden = 64;
  int spatial_dim = kDefaultFeatureDim;
  int language_dim = kDefaultLanguageDim;
  double grid_init_amplitude = 1e-4;
};

struct SemanticFieldParams {
  FieldConfig config;
  MultiResGrid grid;
  nn::Mlp head_s;  // encoding -> hidden -> spatial_dim
  nn::Mlp head_l;  // encoding -> hidden -> language_dim

  static SemanticFieldParams init(const FieldConfig& cfg, std::uint64_t seed) {
    cfg.grid.validate();
    require(cfg.hidden >= 1 && cfg.spatial_dim >= 1 && cfg.language_dim >= 1,
            "field: layer widths must be positive");
    Rng rng(seed);
    SemanticFieldParams p{cfg, MultiResGrid::uniform(cfg.grid, cfg.grid_init_amplitude, rng), {}, {}};
    const int e = cfg.grid.encoding_dim();
    p.head_s = nn::Mlp::glorot({e, cfg.hidden, cfg.spatial_dim}, rng);
    p.head_l = nn::Mlp::glorot({e, cfg.hidden, cfg.language_dim}, rng);
    return p;
  }

  /// Same shapes with every value zero; doubles as the gradient structure.
  SemanticFieldParams zeros_like() const {
    return {config, MultiResGrid::zeros(config.grid), head_s.zeros_like(), head_l.zeros_like()};
  }

  /// Visits parameter blocks in a fixed order: grid levels, head_s, head_l.
  template <typename F>
  void visit(F&& f) {
    for (auto& v : grid.values) f(v.data(), static_cast<std::size_t>(v.size()));
    head_s.visit(f);
    head_l.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    for (const auto& v : grid.values) f(v.data(), static_cast<std::size_t>(v.size()));
    head_s.visit(f);
    head_l.visit(f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const double*, std::size_t k) { n += k; });
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    visit([&](const double* p, std::size_t k) { out.insert(out.end(), p, p + k); });
    return out;
  }

  void unflatten(std::span<const double> flat) {
    require(flat.size() == parameter_count(), "field: flat parameter size mismatch");
    std::size_t o = 0;
    visit([&](double* p, std::size_t k) {
      std::copy(flat.begin() + o, flat.begin() + o + k, p);
      o += k;
    });
  }
};

struct FieldOutput {
  VecX spatial;
  VecX language;
};

inline FieldOutput field_eval(const SemanticFieldParams& p, const Vec3& x) {
  const VecX enc = p.grid.encode(x);
  return {p.head_s.forward(enc), p.head_l.forward(enc)};
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossWeights {
  double frobenius = 1e-2;
  double cosine = 1.0;
};

inline constexpr double kCosineEps = 1e-8;

inline double cosine_similarity(const VecX& a, const VecX& b) {
  return a.dot(b) / (a.norm() * b.norm() + kCosineEps);
}

/// d csim(a, b) / d a for csim = a.b / (|a||b| + eps).
inline VecX cosine_similarity_grad(const VecX& a, const VecX& b) {
  const double na = a.norm(), nb = b.norm();
  const double den = na * nb + kCosineEps;
  VecX g = b / den;
  if (na > 0.0) g -= (a.dot(b) * nb / (den * den * na)) * a;
  return g;
}

/// Components of the distillation loss. `total` is
///   sum_c lambda_F ||I_c - I^_c||_F^2 - lambda_cos sum_c sum_px csim
/// and `photometric` is the slot for the radiance field's own RGB term,
/// which is zero here because the scene is given rather than trained.
struct LossReport {
  double frobenius = 0.0;  // unweighted sum over both heads
  double cosine = 0.0;     // unweighted sum of csim over pixels and heads
  double photometric = 0.0;
  double total = 0.0;
  std::size_t terms = 0;   // number of (pixel, head) pairs with a nonzero target

  /// total shifted by lambda_cos * terms; non-negative, zero at a perfect fit.
  double shifted(const LossWeights& w) const { return total + w.cosine * static_cast<double>(terms); }
};

inline LossReport distill_loss(const FeatureImage& rendered_s, const FeatureImage& rendered_l,
                               const FeatureImage& gt_s, const FeatureImage& gt_l,
                               const LossWeights& w = {}) {
  require(rendered_s.same_shape(gt_s) && rendered_l.same_shape(gt_l),
          "distill_loss: rendered and ground-truth shapes differ");
  require(rendered_s.same_size(rendered_l.width, rendered_l.height),
          "distill_loss: spatial and language images differ in size");
  LossReport r;
  auto accumulate = [&](const FeatureImage& a, const FeatureImage& b) {
    const int d = a.channels;
    for (std::size_t i = 0; i < a.pixel_count(); ++i) {
      Eigen::Map<const VecX> va(a.data.data() + i * d, d), vb(b.data.data() + i * d, d);
      r.frobenius += (va - vb).squaredNorm();
      r.cosine += va.dot(vb) / (va.norm() * vb.norm() + kCosineEps);
      if (vb.squaredNorm() > 0.0) ++r.terms;
    }
  };
  accumulate(rendered_s, gt_s);
  accumulate(rendered_l, gt_l);
  r.total = w.frobenius * r.frobenius - w.cosine * r.cosine;
  return r;
}

/// One supervised point: a back-projected pixel and its target features.
struct DistillSample {
  Vec3 point;
  VecX gt_s;
  VecX gt_l;
};

/// Loss over a batch of samples, identical in form to distill_loss.
inline LossReport batch_loss(const SemanticFieldParams& p, std::span<const DistillSample> batch,
                             const LossWeights& w = {}) {
  LossReport r;
  for (const auto& s : batch) {
    const FieldOutput o = field_eval(p, s.point);
    r.frobenius += (o.spatial - s.gt_s).squaredNorm() + (o.language - s.gt_l).squaredNorm();
    r.cosine += cosine_similarity(o.spatial, s.gt_s) + cosine_similarity(o.language, s.gt_l);
    r.terms += (s.gt_s.squaredNorm() > 0.0) + (s.gt_l.squaredNorm() > 0.0);
  }
  r.total = w.frobenius * r.frobenius - w.cosine * r.cosine;
  return r;
}

/// Exact reverse-mode gradient of batch_loss w.r.t. every grid value and
/// head weight. Returns the loss; gradients are added into `grad`.
inline LossReport loss_gradient(const SemanticFieldParams& p, std::span<const DistillSample> batch,
                                SemanticFieldParams& grad, const LossWeights& w = {}) {
  LossReport r;
  nn::Mlp::Cache cs, cl;
  for (const auto& s : batch) {
    const VecX enc = p.grid.encode(s.point);
    const VecX ys = p.head_s.forward(enc, &cs);
    const VecX yl = p.head_l.forward(enc, &cl);
    const double css = cosine_similarity(ys, s.gt_s), csl = cosine_similarity(yl, s.gt_l);
    r.frobenius += (ys - s.gt_s).squaredNorm() + (yl - s.gt_l).squaredNorm();
    r.cosine += css + csl;
    r.terms += (s.gt_s.squaredNorm() > 0.0) + (s.gt_l.squaredNorm() > 0.0);

    const VecX dys = 2.0 * w.frobenius * (ys - s.gt_s) - w.cosine * cosine_similarity_grad(ys, s.gt_s);
    const VecX dyl = 2.0 * w.frobenius * (yl - s.gt_l) - w.cosine * cosine_similarity_grad(yl, s.gt_l);
    VecX denc = p.head_s.backward(cs, dys, grad.head_s);
    denc += p.head_l.backward(cl, dyl, grad.head_l);
    p.grid.accumulate(s.point, denc, grad.grid);
  }
  r.total = w.frobenius * r.frobenius - w.cosine * r.cosine;
  return r;
}

// ---------------------------------------------------------------------------
// Semantic rendering
// ---------------------------------------------------------------------------

struct SemanticImages {
  FeatureImage spatial;
  FeatureImage language;
};

/// Back-projects every pixel with positive depth and evaluates the field
/// there; background pixels get zero features.
inline SemanticImages render_semantic_image(const SemanticFieldParams& p, const RGBDImage& rgbd,
                                            const CameraIntrinsics& k, const PoseSE3& pose) {
  require(rgbd.depth.same_size(k.width, k.height), "render_semantic_image: size mismatch");
  SemanticImages out{FeatureImage(k.width, k.height, p.config.spatial_dim),
                     FeatureImage(k.width, k.height, p.config.language_dim)};
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const double z = rgbd.depth(x, y);
      if (!(z > 0.0)) continue;
      const FieldOutput o = field_eval(p, backproject(k, pose, Vec2(x, y), z));
      Eigen::Map<VecX>(out.spatial.pixel(x, y), p.config.spatial_dim) = o.spatial;
      Eigen::Map<VecX>(out.language.pixel(x, y), p.config.language_dim) = o.language;
    }
  return out;
}

inline SemanticImages render_semantic_image(const SemanticFieldParams& p, const Scene& scene,
                                            const CameraIntrinsics& k, const PoseSE3& pose,
                                            const RenderConfig& rc = {}) {
  return render_semantic_image(p, render_rgbd(scene, k, pose, rc), k, pose);
}

/// Mean cosine similarity over foreground pixels (depth > 0).
inline double mean_cosine(const FeatureImage& a, const FeatureImage& b, const ImageD& depth) {
  require(a.same_shape(b) && depth.same_size(a.width, a.height), "mean_cosine: shape mismatch");
  const int d = a.channels;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.pixel_count(); ++i) {
    Eigen::Map<const VecX> va(a.data.data() + i * d, d), vb(b.data.data() + i * d, d);
    if (!(depth.data[i] > 0.0)) continue;
    sum += va.dot(vb) / (va.norm() * vb.norm() + kCosineEps);
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingView {
  PoseSE3 pose;
  CameraIntrinsics intrinsics;
  RGBDImage image;
  FeatureImage gt_s;
  FeatureImage gt_l;
};

struct TrainConfig {
  int iterations = 2000;
  int batch_pixels = 256;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
  LossWeights weights;
};

struct TrainResult {
  SemanticFieldParams params;
  std::vector<double> loss_trace;  // per-iteration batch loss / batch size
  LossReport initial;              // full-dataset loss before training
  LossReport final;                // full-dataset loss after training
};

/// Every valid (depth > 0) pixel of every view as a supervised sample.
inline std::vector<DistillSample> collect_samples(const std::vector<TrainingView>& views) {
  std::vector<DistillSample> out;
  for (const auto& v : views) {
    const int ds = v.gt_s.channels, dl = v.gt_l.channels;
    require(v.gt_s.same_size(v.intrinsics.width, v.intrinsics.height) &&
                v.gt_l.same_size(v.intrinsics.width, v.intrinsics.height) &&
                v.image.depth.same_size(v.intrinsics.width, v.intrinsics.height),
            "train_field: view images do not match intrinsics");
    for (int y = 0; y < v.intrinsics.height; ++y)
      for (int x = 0; x < v.intrinsics.width; ++x) {
        const double z = v.image.depth(x, y);
        if (!(z > 0.0)) continue;
        out.push_back({backproject(v.intrinsics, v.pose, Vec2(x, y), z),
                       Eigen::Map<const VecX>(v.gt_s.pixel(x, y), ds),
                       Eigen::Map<const VecX>(v.gt_l.pixel(x, y), dl)});
      }
  }
  return out;
}

inline TrainResult train_field(const std::vector<TrainingView>& views, const FieldConfig& fcfg,
                               const TrainConfig& cfg) {
  require(views.size() >= 2, "train_field: at least two views are required");
  require(cfg.iterations >= 1 && cfg.batch_pixels >= 1 && cfg.learning_rate > 0.0,
          "train_field: iterations, batch size and learning rate must be positive");
  const auto samples = collect_samples(views);
  require(!samples.empty(), "train_field: views contain no foreground pixels");
  require(samples.front().gt_s.size() == fcfg.spatial_dim &&
              samples.front().gt_l.size() == fcfg.language_dim,
          "train_field: feature dimensions do not match the field heads");

  TrainResult res{SemanticFieldParams::init(fcfg, derive_seed(cfg.seed, 1)), {}, {}, {}};
  SemanticFieldParams grad = res.params.zeros_like();
  res.initial = batch_loss(res.params, samples, cfg.weights);

  std::vector<std::span<double>> pblocks;
  std::vector<std::span<const double>> gblocks;
  res.params.visit([&](double* d, std::size_t n) { pblocks.emplace_back(d, n); });
  grad.visit([&](const double* d, std::size_t n) { gblocks.emplace_back(d, n); });
  nn::Adam adam(res.params.parameter_count(), {cfg.learning_rate, 0.9, 0.999, 1e-8});

  Rng rng(derive_seed(cfg.seed, 2));
  std::vector<DistillSample> batch(static_cast<std::size_t>(cfg.batch_pixels));
  res.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations));
  for (int it = 0; it < cfg.iterations; ++it) {
    for (auto& b : batch) b = samples[rng.index(samples.size())];
    grad.visit([](double* d, std::size_t n) { std::fill(d, d + n, 0.0); });
    const LossReport lr = loss_gradient(res.params, batch, grad, cfg.weights);
    const double mean = lr.total / static_cast<double>(batch.size());
    res.loss_trace.push_back(mean);
    if (!std::isfinite(mean))
      throw TrainingFailure("train_field: loss diverged at iteration " + std::to_string(it),
                            res.loss_trace);
    adam.step(pblocks, gblocks);
  }
  res.final = batch_loss(res.params, samples, cfg.weights);
  return res;
}

}  // namespace spine
