// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// 2D-3D correspondences, Levenberg-Marquardt PnP, RANSAC, and the
// patch-correlation matcher that produces correspondences between a query
// feature image and a rendered one.

#pragma once

#include "spine/common.hpp"
#include "spine/features.hpp"
#include "spine/geometry.hpp"
#include "spine/gff.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace spine {

struct Correspondence {
  Vec2 pixel;   // query image coordinates
  Vec3 point;   // world point
  double score = 1.0;
};

// ---------------------------------------------------------------------------
// Reprojection
// ---------------------------------------------------------------------------

/// Squared reprojection error of one correspondence under world-to-camera
/// (R, t); infinity when the point is not in front of the camera.
inline double reprojection_sq(const CameraIntrinsics& k, const Mat3& r, const Vec3& t,
                              const Correspondence& c) {
  const Vec3 x = r * c.point + t;
  if (!(x.z() > 1e-9)) return std::numeric_limits<double>::infinity();
  const Vec2 uv(k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy);
  return (uv - c.pixel).squaredNorm();
}

inline double reprojection_error(const CameraIntrinsics& k, const PoseSE3& pose,
                                 const Correspondence& c) {
  return std::sqrt(reprojection_sq(k, pose.world_to_camera_rotation(),
                                   pose.world_to_camera_translation(), c));
}

inline double total_reprojection_sq(const CameraIntrinsics& k, const Mat3& r, const Vec3& t,
                                    std::span<const Correspondence> cs) {
  double s = 0.0;
  for (const auto& c : cs) s += reprojection_sq(k, r, t, c);
  return s;
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt
// ---------------------------------------------------------------------------

struct PnpConfig {
  int max_iterations = 100;
  double step_tolerance = 1e-10;
  double initial_lambda = 1e-3;
};

struct PnpResult {
  PoseSE3 pose;
  std::vector<double> cost_trace;  // cost after every accepted step, starting at init
  int iterations = 0;
};

/// Minimizes the summed squared reprojection error over the world-to-camera
/// rotation (updated as exp(w) R) and translation. Every point must lie in
/// front of the initial camera.
inline PnpResult solve_pnp_traced(std::span<const Correspondence> cs, const CameraIntrinsics& k,
                                  const PoseSE3& init, const PnpConfig& cfg = {}) {
  if (cs.size() < 6) throw InvalidArgument("solve_pnp: at least 6 correspondences are required");
  Mat3 r = init.world_to_camera_rotation();
  Vec3 t = init.world_to_camera_translation();
  double cost = total_reprojection_sq(k, r, t, cs);
  if (!std::isfinite(cost)) throw BehindCamera("solve_pnp: a point lies behind the initial camera");

  using Mat6 = Eigen::Matrix<double, 6, 6>;
  using Vec6d = Eigen::Matrix<double, 6, 1>;
  PnpResult res;
  res.cost_trace.push_back(cost);
  double lambda = cfg.initial_lambda;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    res.iterations = it + 1;
    Mat6 h = Mat6::Zero();
    Vec6d g = Vec6d::Zero();
    for (const auto& c : cs) {
      const Vec3 rq = r * c.point;
      const Vec3 x = rq + t;
      const double iz = 1.0 / x.z();
      const Vec2 e(k.fx * x.x() * iz + k.cx - c.pixel.x(), k.fy * x.y() * iz + k.cy - c.pixel.y());
      Eigen::Matrix<double, 2, 3> dp;
      dp << k.fx * iz, 0, -k.fx * x.x() * iz * iz, 0, k.fy * iz, -k.fy * x.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> j;
      j.leftCols<3>() = -dp * skew(rq);
      j.rightCols<3>() = dp;
      h.noalias() += j.transpose() * j;
      g.noalias() += j.transpose() * e;
    }
    Eigen::SelfAdjointEigenSolver<Mat6> eig(h, Eigen::EigenvaluesOnly);
    if (!(eig.eigenvalues()[0] > 1e-12 * std::max(eig.eigenvalues()[5], 1e-300)))
      throw DegenerateConfiguration("solve_pnp: singular normal equations");

    bool accepted = false;
    Vec6d step = Vec6d::Zero();
    while (lambda < 1e12) {
      Mat6 a = h;
      a.diagonal() += lambda * h.diagonal();
      step = -a.ldlt().solve(g);
      const Mat3 r2 = exp_so3(Vec3(step.head<3>())).matrix() * r;
      const Vec3 t2 = t + step.tail<3>();
      const double c2 = total_reprojection_sq(k, r2, t2, cs);
      if (c2 <= cost) {
        r = r2;
        t = t2;
        cost = c2;
        lambda = std::max(lambda * 0.1, 1e-12);
        accepted = true;
        res.cost_trace.push_back(cost);
        break;
      }
      lambda *= 10.0;
      if (step.norm() < cfg.step_tolerance) break;
    }
    if (!accepted || step.norm() < cfg.step_tolerance || cost == 0.0) break;
  }
  res.pose = PoseSE3::from_world_to_camera(Rotation::unchecked(r).normalized().matrix(), t);
  return res;
}

inline PoseSE3 solve_pnp(std::span<const Correspondence> cs, const CameraIntrinsics& k,
                         const PoseSE3& init, const PnpConfig& cfg = {}) {
  return solve_pnp_traced(cs, k, init, cfg).pose;
}

// ---------------------------------------------------------------------------
// RANSAC
// ---------------------------------------------------------------------------

struct RansacConfig {
  double inlier_threshold = 2.0;  // pixels
  int max_iterations = 1000;
  double confidence = 0.99;
  int min_sample = 6;
  std::uint64_t seed = 0;

  void validate() const {
    require(inlier_threshold > 0.0, "ransac: inlier threshold must be positive");
    require(max_iterations >= 1, "ransac: max iterations must be >= 1");
    require(confidence > 0.0 && confidence < 1.0, "ransac: confidence must lie in (0,1)");
    require(min_sample >= 6, "ransac: minimal sample must be >= 6");
  }
};

struct RansacResult {
  PoseSE3 pose;
  std::vector<std::size_t> inliers;
  int hypotheses = 0;
};

namespace detail {

inline std::vector<std::size_t> inliers_of(const CameraIntrinsics& k, const PoseSE3& pose,
                                           std::span<const Correspondence> cs, double thresh) {
  const Mat3 r = pose.world_to_camera_rotation();
  const Vec3 t = pose.world_to_camera_translation();
  std::vector<std::size_t> in;
  for (std::size_t i = 0; i < cs.size(); ++i)
    if (reprojection_sq(k, r, t, cs[i]) < thresh * thresh) in.push_back(i);
  return in;
}

/// Sum of truncated squared residuals, used to break ties between
/// hypotheses with equal inlier counts.
inline double inlier_cost(const CameraIntrinsics& k, const PoseSE3& pose,
                          std::span<const Correspondence> cs, double thresh) {
  const Mat3 r = pose.world_to_camera_rotation();
  const Vec3 t = pose.world_to_camera_translation();
  double s = 0.0;
  for (const auto& c : cs) s += std::min(reprojection_sq(k, r, t, c), thresh * thresh);
  return s;
}

}  // namespace detail

/// Minimal-sample LM hypotheses from `init`, scored by inlier count, then a
/// final LM refit on the best consensus set. Returned inliers are those under
/// the threshold for the returned pose.
inline RansacResult ransac_pnp(std::span<const Correspondence> cs, const CameraIntrinsics& k,
                               const RansacConfig& cfg, const PoseSE3& init) {
  cfg.validate();
  const std::size_t n = cs.size();
  const auto m = static_cast<std::size_t>(cfg.min_sample);
  if (n < m) throw InsufficientMatches("ransac_pnp: fewer correspondences than the minimal sample");

  Rng rng(cfg.seed);
  RansacResult best;
  std::size_t best_count = 0;
  double best_cost = std::numeric_limits<double>::infinity();
  bool found = false;
  long needed = cfg.max_iterations;
  std::vector<std::size_t> idx(n);
  std::vector<Correspondence> sample(m);
  for (int it = 0; it < cfg.max_iterations && it < needed; ++it) {
    ++best.hypotheses;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < m; ++i) {
      std::swap(idx[i], idx[i + rng.index(n - i)]);
      sample[i] = cs[idx[i]];
    }
    PoseSE3 hyp;
    try {
      hyp = solve_pnp(sample, k, init);
    } catch (const Error&) {
      continue;
    }
    const auto in = detail::inliers_of(k, hyp, cs, cfg.inlier_threshold);
    if (in.size() < m) continue;
    const double cost = detail::inlier_cost(k, hyp, cs, cfg.inlier_threshold);
    if (!found || in.size() > best_count || (in.size() == best_count && cost < best_cost)) {
      found = true;
      best_count = in.size();
      best_cost = cost;
      best.pose = hyp;
      best.inliers = in;
      const double w = static_cast<double>(in.size()) / static_cast<double>(n);
      const double miss = 1.0 - std::pow(w, static_cast<double>(m));
      if (miss <= 0.0) {
        needed = 0;
      } else {
        const double req = std::log(1.0 - cfg.confidence) / std::log(miss);
        needed = static_cast<long>(std::min<double>(std::ceil(req), cfg.max_iterations));
      }
    }
  }
  if (!found) throw RansacFailure("ransac_pnp: no hypothesis reached the minimal inlier count");

  std::vector<Correspondence> inl;
  for (auto i : best.inliers) inl.push_back(cs[i]);
  try {
    const PoseSE3 refit = solve_pnp(inl, k, best.pose);
    const auto in = detail::inliers_of(k, refit, cs, cfg.inlier_threshold);
    if (in.size() >= best.inliers.size()) {
      best.pose = refit;
      best.inliers = in;
    }
  } catch (const Error&) {
  }
  best.inliers = detail::inliers_of(k, best.pose, cs, cfg.inlier_threshold);
  return best;
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

struct MatchConfig {
  int max_keypoints = 200;
  int patch_radius = 3;     // 7 x 7 patches
  int search_radius = 40;   // pixels
  double ratio = 0.8;       // best / second-best distance, distance = 1 - NCC
  /// Second-best candidates must lie further than this from the best one.
  int exclusion_radius = 3;
  /// Features are projected onto this many principal components of the
  /// query before correlation.
  int descriptor_dim = 8;
  double min_patch_std = 1e-6;
  int min_matches = 6;
};

namespace detail {

/// Zero-mean, unit-norm descriptor patches for every pixel whose patch fits
/// inside the image; empty vectors elsewhere or for flat patches.
inline std::vector<VecX> patch_descriptors(const ImageD& img, int rad, double min_std) {
  const int w = img.width, h = img.height, c = img.channels;
  const int len = (2 * rad + 1) * (2 * rad + 1) * c;
  std::vector<VecX> out(img.pixel_count());
  for (int y = rad; y < h - rad; ++y)
    for (int x = rad; x < w - rad; ++x) {
      VecX v(len);
      int i = 0;
      for (int dy = -rad; dy <= rad; ++dy)
        for (int dx = -rad; dx <= rad; ++dx)
          for (int ch = 0; ch < c; ++ch) v[i++] = img(x + dx, y + dy, ch);
      v.array() -= v.mean();
      const double nrm = v.norm();
      if (nrm / std::sqrt(static_cast<double>(len)) < min_std) continue;
      out[static_cast<std::size_t>(y) * w + x] = v / nrm;
    }
  return out;
}

/// Vertex offset in [-0.5, 0.5] of the parabola through three samples; 0
/// when a neighbour is missing or the samples are not a strict maximum.
inline double parabola_peak(double l, double c, double r) {
  if (l < -1.5 || r < -1.5) return 0.0;
  const double den = l - 2.0 * c + r;
  if (!(den < 0.0)) return 0.0;
  return std::clamp(0.5 * (l - r) / den, -0.5, 0.5);
}

/// Bilinear depth at a subpixel location when all four neighbours are
/// foreground; the depth at pixel (fx0, fy0) otherwise.
inline double sample_depth(const ImageD& depth, const Vec2& p, int fx0, int fy0) {
  const int x0 = static_cast<int>(std::floor(p.x())), y0 = static_cast<int>(std::floor(p.y()));
  const double fx = p.x() - x0, fy = p.y() - y0;
  const int x1 = clamp_index(x0 + 1, depth.width), y1 = clamp_index(y0 + 1, depth.height);
  const int xa = clamp_index(x0, depth.width), ya = clamp_index(y0, depth.height);
  const double d00 = depth(xa, ya), d10 = depth(x1, ya), d01 = depth(xa, y1), d11 = depth(x1, y1);
  if (d00 > 0.0 && d10 > 0.0 && d01 > 0.0 && d11 > 0.0)
    return (1 - fy) * ((1 - fx) * d00 + fx * d10) + fy * ((1 - fx) * d01 + fx * d11);
  return depth(fx0, fy0);
}

inline ImageD project_features(const FeatureImage& f, const MatX& basis, const VecX& mean) {
  const int d = f.channels, k = static_cast<int>(basis.cols());
  ImageD out(f.width, f.height, k);
  for (std::size_t i = 0; i < f.pixel_count(); ++i) {
    Eigen::Map<const VecX> v(f.data.data() + i * d, d);
    Eigen::Map<VecX>(out.data.data() + i * k, k) = basis.transpose() * (v - mean);
  }
  return out;
}

}  // namespace detail

/// Local maxima (3 x 3, strict against earlier pixels) of the channel-summed
/// Sobel magnitude, strongest first, at most `max_count`, excluding a border
/// of `border` pixels.
inline std::vector<Vec2> detect_keypoints(const ImageD& img, int max_count, int border) {
  const ImageD g = sobel_magnitude(img);
  const int w = img.width, h = img.height;
  ImageD s(w, h, 1);
  for (std::size_t i = 0; i < s.data.size(); ++i)
    for (int c = 0; c < g.channels; ++c) s.data[i] += g.data[i * g.channels + c];
  struct Cand {
    double v;
    int x, y;
  };
  std::vector<Cand> cands;
  for (int y = border; y < h - border; ++y)
    for (int x = border; x < w - border; ++x) {
      const double v = s(x, y);
      if (!(v > 0.0)) continue;
      bool peak = true;
      for (int dy = -1; dy <= 1 && peak; ++dy)
        for (int dx = -1; dx <= 1 && peak; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const double u = s(clamp_index(x + dx, w), clamp_index(y + dy, h));
          // Plateaus keep only their first pixel in raster order.
          const bool earlier = dy < 0 || (dy == 0 && dx < 0);
          if (u > v || (earlier && u == v)) peak = false;
        }
      if (peak) cands.push_back({v, x, y});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.v > b.v; });
  if (static_cast<int>(cands.size()) > max_count) cands.resize(static_cast<std::size_t>(max_count));
  std::vector<Vec2> out;
  for (const auto& c : cands) out.emplace_back(c.x, c.y);
  return out;
}

/// Matches query keypoints to the rendered view by normalized cross
/// correlation of feature patches. World points come from back-projecting
/// the matched rendered pixel with the rendered depth and pose.
inline std::vector<Correspondence> match_features(const FeatureImage& query,
                                                  const FeatureImage& rendered,
                                                  const ImageD& rendered_depth,
                                                  const CameraIntrinsics& k,
                                                  const PoseSE3& rendered_pose,
                                                  const MatchConfig& cfg = {}) {
  require(query.same_shape(rendered), "match_features: query and rendered features differ in shape");
  require(rendered_depth.same_size(rendered.width, rendered.height) && rendered_depth.channels == 1,
          "match_features: depth does not match the rendered image");
  require(query.width == k.width && query.height == k.height,
          "match_features: image size does not match intrinsics");
  const int rad = cfg.patch_radius, w = query.width, h = query.height;

  const int dd = std::min(cfg.descriptor_dim, query.channels);
  const PcaResult pca = pca_project(query, dd);
  const ImageD qd = pca.projection;
  const ImageD rd = detail::project_features(rendered, pca.basis, pca.mean);
  const auto qdesc = detail::patch_descriptors(qd, rad, cfg.min_patch_std);
  const auto rdesc = detail::patch_descriptors(rd, rad, cfg.min_patch_std);

  std::vector<Correspondence> out;
  const int r2 = cfg.search_radius * cfg.search_radius;
  const int ex2 = cfg.exclusion_radius * cfg.exclusion_radius;
  for (const Vec2& kp : detect_keypoints(qd, cfg.max_keypoints, rad)) {
    const int qx = static_cast<int>(kp.x()), qy = static_cast<int>(kp.y());
    const VecX& q = qdesc[static_cast<std::size_t>(qy) * w + qx];
    if (q.size() == 0) continue;
    struct Hit {
      double ncc = -2.0;
      int x = -1, y = -1;
    };
    Hit best;
    std::vector<Hit> hits;
    for (int y = std::max(rad, qy - cfg.search_radius); y <= std::min(h - rad - 1, qy + cfg.search_radius); ++y)
      for (int x = std::max(rad, qx - cfg.search_radius); x <= std::min(w - rad - 1, qx + cfg.search_radius); ++x) {
        if ((x - qx) * (x - qx) + (y - qy) * (y - qy) > r2) continue;
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (rdesc[i].size() == 0) continue;
        const Hit hit{q.dot(rdesc[i]), x, y};
        hits.push_back(hit);
        if (hit.ncc > best.ncc) best = hit;
      }
    if (best.x < 0) continue;
    double second = -2.0;
    for (const auto& hit : hits) {
      const int dx = hit.x - best.x, dy = hit.y - best.y;
      if (dx * dx + dy * dy > ex2) second = std::max(second, hit.ncc);
    }
    const double d1 = 1.0 - best.ncc, d2 = 1.0 - second;
    if (!(d1 < cfg.ratio * d2)) continue;
    if (!(rendered_depth(best.x, best.y) > 0.0)) continue;
    auto ncc_at = [&](int x, int y) {
      if (x < 0 || y < 0 || x >= w || y >= h) return -2.0;
      const VecX& r = rdesc[static_cast<std::size_t>(y) * w + x];
      return r.size() ? q.dot(r) : -2.0;
    };
    // A perfect correlation is already the peak; fitting would only add bias.
    const bool exact = best.ncc >= 1.0 - 1e-12;
    const Vec2 at = exact ? Vec2(best.x, best.y) : Vec2(best.x + detail::parabola_peak(ncc_at(best.x - 1, best.y), best.ncc,
                                                 ncc_at(best.x + 1, best.y)),
                  best.y + detail::parabola_peak(ncc_at(best.x, best.y - 1), best.ncc,
                                                 ncc_at(best.x, best.y + 1)));
    out.push_back({kp, backproject(k, rendered_pose, at, detail::sample_depth(rendered_depth, at, best.x, best.y)),
                   std::clamp(best.ncc, 0.0, 1.0)});
  }
  if (static_cast<int>(out.size()) < cfg.min_matches)
    throw InsufficientMatches("match_features: only " + std::to_string(out.size()) +
                              " matches passed the ratio test");
  return out;
}

/// Ground-truth correspondences: every `stride`-th foreground query pixel
/// back-projected with the query's own depth and pose. Optional Gaussian
/// pixel noise of standard deviation `noise_px`.
inline std::vector<Correspondence> oracle_correspondences(const ImageD& query_depth,
                                                          const CameraIntrinsics& k,
                                                          const PoseSE3& query_pose, int stride,
                                                          double noise_px = 0.0,
                                                          std::uint64_t seed = 0) {
  require(stride >= 1, "oracle_correspondences: stride must be >= 1");
  Rng rng(seed);
  std::vector<Correspondence> out;
  for (int y = 0; y < query_depth.height; y += stride)
    for (int x = 0; x < query_depth.width; x += stride) {
      const double z = query_depth(x, y);
      if (!(z > 0.0)) continue;
      Vec2 p(x, y);
      const Vec3 q = backproject(k, query_pose, p, z);
      if (noise_px > 0.0) p += noise_px * Vec2(rng.normal(), rng.normal());
      out.push_back({p, q, 1.0});
    }
  return out;
}

}  // namespace spine
