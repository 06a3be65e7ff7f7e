// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Explicit Gaussian-primitive scene and a deterministic volumetric
// renderer. Each pixel's ray is marched through the scene bounds at a fixed
// step; densities of all primitives are summed and composited front to back.

#pragma once

#include "spine/common.hpp"
#include "spine/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace spine {

struct Aabb {
  Vec3 min = Vec3::Constant(-1.0);
  Vec3 max = Vec3::Constant(1.0);

  double diagonal() const { return (max - min).norm(); }
  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
  bool valid() const {
    return min.allFinite() && max.allFinite() && (max.array() > min.array()).all();
  }

  /// Slab test. Returns false when the ray misses; otherwise [t0, t1] is the
  /// clipped parametric interval with t0 >= 0.
  bool intersect(const Vec3& origin, const Vec3& dir, double& t0, double& t1) const {
    t0 = 0.0;
    t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (std::abs(dir[a]) < 1e-300) {
        if (origin[a] < min[a] || origin[a] > max[a]) return false;
        continue;
      }
      double ta = (min[a] - origin[a]) / dir[a];
      double tb = (max[a] - origin[a]) / dir[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    return t1 > t0;
  }
};

struct GaussianPrimitive {
  Vec3 mean = Vec3::Zero();
  Vec3 scale = Vec3::Constant(0.1);
  Rotation orientation;
  double opacity = 1.0;
  Vec3 color = Vec3::Constant(0.5);
  int label = 0;

  /// Inverse covariance R diag(1/s^2) R^T.
  Mat3 precision() const {
    const Mat3& r = orientation.matrix();
    return r * scale.array().square().inverse().matrix().asDiagonal() * r.transpose();
  }

  bool operator==(const GaussianPrimitive& o) const {
    return mean == o.mean && scale == o.scale && orientation == o.orientation &&
           opacity == o.opacity && color == o.color && label == o.label;
  }
};

struct Scene {
  std::vector<GaussianPrimitive> primitives;
  Vec3 background = Vec3::Zero();
  Aabb bounds;

  void validate() const {
    require(!primitives.empty(), "scene: at least one primitive is required");
    require(bounds.valid(), "scene: bounds must be a non-empty box");
    require(background.allFinite() && (background.array() >= 0.0).all() &&
                (background.array() <= 1.0).all(),
            "scene: background color must lie in [0,1]");
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      const auto& p = primitives[i];
      const std::string at = "scene: primitive " + std::to_string(i) + ": ";
      require(p.mean.allFinite() && bounds.contains(p.mean), at + "mean outside bounds");
      require(p.scale.allFinite() && (p.scale.array() > 0.0).all(), at + "scale must be positive");
      require(p.opacity > 0.0 && p.opacity <= 1.0, at + "opacity must lie in (0,1]");
      require(p.color.allFinite() && (p.color.array() >= 0.0).all() &&
                  (p.color.array() <= 1.0).all(),
              at + "color must lie in [0,1]");
      require(p.label >= 0, at + "label must be non-negative");
    }
  }

  int class_count() const {
    int m = 0;
    for (const auto& p : primitives) m = std::max(m, p.label + 1);
    return m;
  }

  bool operator==(const Scene& o) const {
    return primitives == o.primitives && background == o.background &&
           bounds.min == o.bounds.min && bounds.max == o.bounds.max;
  }
};

struct RGBDImage {
  int width = 0;
  int height = 0;
  ImageD rgb;    // H x W x 3, [0,1]
  ImageD depth;  // H x W x 1, camera-frame z; 0 marks background

  RGBDImage() = default;
  RGBDImage(int w, int h) : width(w), height(h), rgb(w, h, 3), depth(w, h, 1) {}
  bool operator==(const RGBDImage&) const = default;
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct SceneSpec {
  int primitive_count = 24;
  int class_count = 8;
  Aabb bounds;
  double scale_min = 0.05;
  double scale_max = 0.12;
  double opacity_min = 0.6;
  double opacity_max = 1.0;
  /// Means are drawn from the bounds shrunk by this fraction on every side.
  double margin = 0.15;
  Vec3 background = Vec3::Zero();
};

namespace detail {

inline bool collinear(const Vec3& a, const Vec3& b, const Vec3& c) {
  return (b - a).cross(c - a).norm() < 1e-6 * std::max(1.0, (b - a).norm() * (c - a).norm());
}

inline bool has_noncollinear_triple(const std::vector<GaussianPrimitive>& ps) {
  if (ps.size() < 3) return false;
  for (std::size_t k = 2; k < ps.size(); ++k)
    if (!collinear(ps[0].mean, ps[1].mean, ps[k].mean)) return true;
  return false;
}

}  // namespace detail

/// Deterministic synthetic scene. Labels cycle through the classes
/// (primitive i gets label i mod class_count) so every class is present
/// whenever primitive_count >= class_count.
inline Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  require(spec.primitive_count >= 1, "generate_scene: primitive_count must be >= 1");
  require(spec.class_count >= 1, "generate_scene: class_count must be >= 1");
  require(spec.bounds.valid(), "generate_scene: invalid bounds");
  require(spec.scale_min > 0.0 && spec.scale_max >= spec.scale_min,
          "generate_scene: invalid scale range");
  require(spec.opacity_min > 0.0 && spec.opacity_max <= 1.0 &&
              spec.opacity_max >= spec.opacity_min,
          "generate_scene: invalid opacity range");
  require(spec.margin >= 0.0 && spec.margin < 0.5, "generate_scene: margin must be in [0, 0.5)");

  Rng rng(seed);
  Scene scene;
  scene.bounds = spec.bounds;
  scene.background = spec.background;
  const Vec3 ext = spec.bounds.max - spec.bounds.min;
  const Vec3 lo = spec.bounds.min + spec.margin * ext;
  const Vec3 hi = spec.bounds.max - spec.margin * ext;

  auto draw = [&](int i) {
    GaussianPrimitive p;
    for (int a = 0; a < 3; ++a) p.mean[a] = rng.uniform(lo[a], hi[a]);
    for (int a = 0; a < 3; ++a) p.scale[a] = rng.uniform(spec.scale_min, spec.scale_max);
    const Vec3 axis = rng.unit_vector();
    p.orientation = exp_so3(Vec3(rng.uniform(0.0, kPi) * axis));
    p.opacity = rng.uniform(spec.opacity_min, spec.opacity_max);
    for (int a = 0; a < 3; ++a) p.color[a] = rng.uniform(0.05, 0.95);
    p.label = i % spec.class_count;
    return p;
  };

  for (int i = 0; i < spec.primitive_count; ++i) scene.primitives.push_back(draw(i));
  // Redraw the tail until some triple of means spans a plane.
  int guard = 0;
  while (spec.primitive_count >= 3 && !detail::has_noncollinear_triple(scene.primitives)) {
    require(++guard < 100, "generate_scene: could not place non-collinear means");
    scene.primitives.back() = draw(spec.primitive_count - 1);
  }
  scene.validate();
  return scene;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct RenderConfig {
  /// Ray-march step; <= 0 selects bounds_diagonal / 256.
  double step = 0.0;
  /// Multiplies the summed primitive densities (units: 1 / scene unit).
  double density_scale = 300.0;
  /// Pixels whose accumulated weight falls below this are background.
  double min_coverage = 0.01;
  /// Primitives farther than this many standard deviations from a ray are
  /// skipped for that ray.
  double cull_sigmas = 5.0;
  /// Marching stops once transmittance drops below this value.
  double min_transmittance = 1e-7;

  double resolved_step(const Aabb& b) const { return step > 0.0 ? step : b.diagonal() / 256.0; }
};

/// Everything recorded while compositing a single ray.
struct RayTrace {
  std::vector<double> sample_depth;  // camera-frame z per sample
  std::vector<double> weights;       // compositing weight per sample
  double final_transmittance = 1.0;
  std::vector<double> primitive_weight;  // total weight per primitive
  Vec3 color = Vec3::Zero();             // composited, without background
  double weight_sum() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
  }
};

namespace detail {

struct PreparedPrimitive {
  Vec3 mean;
  Mat3 precision;
  double opacity;
  Vec3 color;
  int label;
};

inline std::vector<PreparedPrimitive> prepare(const Scene& scene) {
  std::vector<PreparedPrimitive> out;
  out.reserve(scene.primitives.size());
  for (const auto& p : scene.primitives)
    out.push_back({p.mean, p.precision(), p.opacity, p.color, p.label});
  return out;
}

struct ActiveSpan {
  std::size_t index;
  double t0, t1;
};

/// Marches one ray. `dir` is the camera-frame direction with z = 1 rotated
/// to world, so t / ||dir|| converts Euclidean distance to camera depth.
inline RayTrace march(const std::vector<PreparedPrimitive>& prims, const Aabb& bounds,
                      const Vec3& origin, const Vec3& dir_z1, const RenderConfig& cfg) {
  RayTrace tr;
  tr.primitive_weight.assign(prims.size(), 0.0);
  const double dir_len = dir_z1.norm();
  const Vec3 d = dir_z1 / dir_len;
  double t0 = 0.0, t1 = 0.0;
  if (!bounds.intersect(origin, d, t0, t1)) return tr;

  const double cull2 = cfg.cull_sigmas * cfg.cull_sigmas;
  std::vector<ActiveSpan> spans;
  for (std::size_t i = 0; i < prims.size(); ++i) {
    const Vec3 pd = prims[i].precision * d;
    const double a = d.dot(pd);
    const Vec3 off = prims[i].mean - origin;
    const double tc = off.dot(pd) / a;
    const Vec3 closest = origin + tc * d - prims[i].mean;
    const double m2 = closest.dot(prims[i].precision * closest);
    if (m2 > cull2) continue;
    const double h = std::sqrt((cull2 - m2) / a);
    if (tc + h < t0 || tc - h > t1) continue;
    spans.push_back({i, tc - h, tc + h});
  }
  if (spans.empty()) return tr;

  const double step = cfg.resolved_step(bounds);
  const auto n = static_cast<std::size_t>(std::ceil((t1 - t0) / step));
  double transmittance = 1.0;
  std::vector<double> contrib(prims.size(), 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double t = t0 + (static_cast<double>(j) + 0.5) * step;
    const Vec3 x = origin + t * d;
    double sigma = 0.0;
    Vec3 c = Vec3::Zero();
    for (const auto& s : spans) {
      if (t < s.t0 || t > s.t1) continue;
      const auto& p = prims[s.index];
      const Vec3 dx = x - p.mean;
      const double g = cfg.density_scale * p.opacity * std::exp(-0.5 * dx.dot(p.precision * dx));
      contrib[s.index] = g;
      sigma += g;
      c += g * p.color;
    }
    if (sigma <= 0.0) {
      for (const auto& s : spans) contrib[s.index] = 0.0;
      continue;
    }
    const double alpha = 1.0 - std::exp(-sigma * step);
    const double w = transmittance * alpha;
    tr.color += w * (c / sigma);
    tr.sample_depth.push_back(t / dir_len);
    tr.weights.push_back(w);
    for (const auto& s : spans) {
      if (contrib[s.index] > 0.0) tr.primitive_weight[s.index] += w * contrib[s.index] / sigma;
      contrib[s.index] = 0.0;
    }
    transmittance *= std::exp(-sigma * step);
    if (transmittance < cfg.min_transmittance) break;
  }
  tr.final_transmittance = transmittance;
  return tr;
}

}  // namespace detail

/// World-space origin and (z = 1 camera-frame) direction of a pixel ray.
inline std::pair<Vec3, Vec3> pixel_ray_world(const CameraIntrinsics& k, const PoseSE3& pose,
                                             double px, double py) {
  return {pose.translation, pose.rotation.matrix() * pixel_ray(k, Vec2(px, py))};
}

/// Composites the ray through pixel (px, py); exposed for inspection.
inline RayTrace trace_pixel(const Scene& scene, const CameraIntrinsics& k, const PoseSE3& pose,
                            double px, double py, const RenderConfig& cfg = {}) {
  const auto prims = detail::prepare(scene);
  const auto [o, d] = pixel_ray_world(k, pose, px, py);
  return detail::march(prims, scene.bounds, o, d, cfg);
}

struct RenderOutput {
  RGBDImage image;
  LabelMap labels;
  ImageD coverage;  // accumulated weight per pixel
};

/// Renders RGB, expected depth, coverage and the dominant-primitive label.
inline RenderOutput render_full(const Scene& scene, const CameraIntrinsics& k,
                                const PoseSE3& pose, const RenderConfig& cfg = {}) {
  k.validate();
  const double step = cfg.resolved_step(scene.bounds);
  require(step > 0.0 && (scene.bounds.diagonal() / step) >= 2.0,
          "render: at least two ray-march steps are required");
  const auto prims = detail::prepare(scene);
  RenderOutput out{RGBDImage(k.width, k.height), LabelMap(k.width, k.height, 1, kBackgroundLabel),
                   ImageD(k.width, k.height, 1)};
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const auto [o, d] = pixel_ray_world(k, pose, x, y);
      const RayTrace tr = detail::march(prims, scene.bounds, o, d, cfg);
      const double wsum = tr.weight_sum();
      const Vec3 rgb = tr.color + tr.final_transmittance * scene.background;
      for (int c = 0; c < 3; ++c) out.image.rgb(x, y, c) = std::clamp(rgb[c], 0.0, 1.0);
      out.coverage(x, y) = wsum;
      if (wsum < cfg.min_coverage) continue;
      double dsum = 0.0;
      for (std::size_t j = 0; j < tr.weights.size(); ++j) dsum += tr.weights[j] * tr.sample_depth[j];
      out.image.depth(x, y) = dsum / std::max(wsum, 1e-12);
      // Dominant primitive; exact ties go to the smaller label so the map
      // does not depend on primitive order.
      int best = -1;
      for (std::size_t i = 0; i < prims.size(); ++i) {
        if (tr.primitive_weight[i] <= 0.0) continue;
        if (best < 0 || tr.primitive_weight[i] > tr.primitive_weight[best] ||
            (tr.primitive_weight[i] == tr.primitive_weight[best] &&
             prims[i].label < prims[best].label))
          best = static_cast<int>(i);
      }
      out.labels(x, y) = best >= 0 ? prims[best].label : kBackgroundLabel;
    }
  }
  return out;
}

inline RGBDImage render_rgbd(const Scene& scene, const CameraIntrinsics& k, const PoseSE3& pose,
                             const RenderConfig& cfg = {}) {
  return render_full(scene, k, pose, cfg).image;
}

inline LabelMap render_label_image(const Scene& scene, const CameraIntrinsics& k,
                                   const PoseSE3& pose, const RenderConfig& cfg = {}) {
  return render_full(scene, k, pose, cfg).labels;
}

}  // namespace spine
