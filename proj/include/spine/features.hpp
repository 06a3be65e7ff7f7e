// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic stand-ins for pretrained feature backbones, global image
// embeddings, and PCA projection of feature images.
//
// Two oracle families are provided. VisualOnly assigns every pixel a fixed
// per-class prototype plus a faint colour term and blurs the result
// heavily: object-level content with soft boundaries. VisualGeometry starts
// from the same prototypes, adds channels driven by depth gradients and a
// surface-normal proxy, and blurs lightly: structure-rich with sharp edges.

#pragma once

#include "spine/common.hpp"
#include "spine/scene.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace spine {

/// H x W x d feature map (channels == d).
using FeatureImage = ImageD;

enum class BackboneKind { VisualOnly, VisualGeometry };

inline std::string_view to_string(BackboneKind k) {
  return k == BackboneKind::VisualOnly ? "visual" : "geom";
}

inline BackboneKind parse_backbone(std::string_view s) {
  if (s == "visual" || s == "visual-only" || s == "VisualOnly") return BackboneKind::VisualOnly;
  if (s == "geom" || s == "visual-geometry" || s == "VisualGeometry")
    return BackboneKind::VisualGeometry;
  throw InvalidArgument("unknown backbone '" + std::string(s) + "' (expected visual|geom)");
}

inline constexpr int kDefaultFeatureDim = 128;
inline constexpr int kDefaultLanguageDim = 32;
inline constexpr int kDefaultEmbeddingDim = 64;

struct OracleConfig {
  /// Amplitude of the colour projection added to the class prototype.
  double color_amplitude = 0.15;
  /// Amplitude of the geometry channels (VisualGeometry only).
  double geometry_amplitude = 0.5;
  double visual_blur_sigma = 2.0;
  int visual_blur_radius = 2;  // 5 x 5 kernel
  double geometry_blur_sigma = 0.5;
  int geometry_blur_radius = 1;
  /// Gain applied to depth differences (scene units / pixel) before tanh.
  double depth_gradient_gain = 8.0;
};

// ---------------------------------------------------------------------------
// Class prototypes
// ---------------------------------------------------------------------------

/// Seeded unit-norm prototype for a class label. The background label gets
/// the zero vector so that background pixels carry no semantic content.
inline VecX class_prototype(int label, int dim, std::uint64_t seed) {
  VecX v = VecX::Zero(dim);
  if (label == kBackgroundLabel) return v;
  Rng rng(derive_seed(seed, 0x1000 + static_cast<std::uint64_t>(label)));
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v / v.norm();
}

/// Language-space prototype (the "text embedding" of a class name).
inline VecX language_prototype(int label, int dim, std::uint64_t seed) {
  return class_prototype(label, dim, derive_seed(seed, 0x4C414E47));
}

/// Seeded dense matrix with N(0, 1/rows) entries (columns of unit
/// expected norm).
inline MatX seeded_matrix(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  MatX m(rows, cols);
  const double s = 1.0 / std::sqrt(static_cast<double>(rows));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = s * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// Geometry channels
// ---------------------------------------------------------------------------

/// Four channels from depth: tanh-compressed gradient magnitude followed by
/// a unit normal proxy (-gx, -gy, eps) / ||.||, using central differences
/// with replicate padding. Constant depth yields (0, 0, 0, 1).
inline ImageD geometry_channels(const ImageD& depth, double gain) {
  const int w = depth.width, h = depth.height;
  ImageD g(w, h, 4);
  constexpr double kFlat = 0.05;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx =
          0.5 * (depth(clamp_index(x + 1, w), y) - depth(clamp_index(x - 1, w), y));
      const double gy =
          0.5 * (depth(x, clamp_index(y + 1, h)) - depth(x, clamp_index(y - 1, h)));
      const double mag = std::sqrt(gx * gx + gy * gy);
      const Vec3 n = Vec3(-gain * gx, -gain * gy, kFlat).normalized();
      g(x, y, 0) = std::tanh(gain * mag);
      g(x, y, 1) = n.x();
      g(x, y, 2) = n.y();
      g(x, y, 3) = n.z();
    }
  return g;
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

inline FeatureImage extract_features(const RGBDImage& img, const LabelMap& labels,
                                     BackboneKind kind, int dim, std::uint64_t seed,
                                     const OracleConfig& cfg = {}) {
  require(dim >= 3, "extract_features: feature dimension must be >= 3");
  require(labels.same_size(img.width, img.height) && labels.channels == 1,
          "extract_features: label map and image dimensions differ");
  require(img.rgb.same_size(img.width, img.height) && img.depth.same_size(img.width, img.height),
          "extract_features: malformed RGB-D image");

  const MatX color_proj = seeded_matrix(dim, 3, derive_seed(seed, 0xC0104));
  const MatX geom_proj = seeded_matrix(dim, 4, derive_seed(seed, 0x6E0));
  std::vector<VecX> protos;
  auto proto = [&](int label) -> const VecX& {
    const std::size_t slot = static_cast<std::size_t>(label + 1);
    if (slot >= protos.size()) protos.resize(slot + 1);
    if (protos[slot].size() == 0) protos[slot] = class_prototype(label, dim, seed);
    return protos[slot];
  };

  FeatureImage f(img.width, img.height, dim);
  ImageD geom;
  if (kind == BackboneKind::VisualGeometry) geom = geometry_channels(img.depth, cfg.depth_gradient_gain);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const Vec3 rgb(img.rgb(x, y, 0) - 0.5, img.rgb(x, y, 1) - 0.5, img.rgb(x, y, 2) - 0.5);
      Eigen::Map<VecX> out(f.pixel(x, y), dim);
      out = proto(labels(x, y)) + cfg.color_amplitude * (color_proj * rgb);
      if (kind == BackboneKind::VisualGeometry) {
        const Eigen::Vector4d gv(geom(x, y, 0), geom(x, y, 1), geom(x, y, 2), geom(x, y, 3));
        out += cfg.geometry_amplitude * (geom_proj * gv);
      }
    }
  return kind == BackboneKind::VisualOnly
             ? gaussian_blur(f, cfg.visual_blur_sigma, cfg.visual_blur_radius)
             : gaussian_blur(f, cfg.geometry_blur_sigma, cfg.geometry_blur_radius);
}

/// Language-aligned features: the language prototype of each pixel's class,
/// blurred like the visual-only backbone. Background pixels are zero.
inline FeatureImage extract_language_features(const LabelMap& labels, int dim, std::uint64_t seed,
                                              const OracleConfig& cfg = {}) {
  require(dim >= 3, "extract_language_features: dimension must be >= 3");
  FeatureImage f(labels.width, labels.height, dim);
  std::vector<VecX> cache;
  for (int y = 0; y < labels.height; ++y)
    for (int x = 0; x < labels.width; ++x) {
      const int l = labels(x, y);
      const std::size_t slot = static_cast<std::size_t>(l + 1);
      if (slot >= cache.size()) cache.resize(slot + 1);
      if (cache[slot].size() == 0) cache[slot] = language_prototype(l, dim, seed);
      Eigen::Map<VecX>(f.pixel(x, y), dim) = cache[slot];
    }
  return gaussian_blur(f, cfg.visual_blur_sigma, cfg.visual_blur_radius);
}

// ---------------------------------------------------------------------------
// Global embedding
// ---------------------------------------------------------------------------

/// Spatial mean of the features concatenated with the spatial means of the
/// per-channel central differences along x and along y, projected to
/// `out_dim` by a fixed matrix. Linear in `f`.
inline VecX global_embedding(const FeatureImage& f, BackboneKind kind,
                             int out_dim = kDefaultEmbeddingDim, std::uint64_t seed = 0) {
  require(f.width > 0 && f.height > 0 && f.channels > 0, "global_embedding: empty feature image");
  const int d = f.channels;
  VecX pooled = VecX::Zero(3 * d);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) {
      const double* p = f.pixel(x, y);
      const double* xp = f.pixel(clamp_index(x + 1, f.width), y);
      const double* xm = f.pixel(clamp_index(x - 1, f.width), y);
      const double* yp = f.pixel(x, clamp_index(y + 1, f.height));
      const double* ym = f.pixel(x, clamp_index(y - 1, f.height));
      for (int c = 0; c < d; ++c) {
        pooled[c] += p[c];
        pooled[d + c] += 0.5 * (xp[c] - xm[c]);
        pooled[2 * d + c] += 0.5 * (yp[c] - ym[c]);
      }
    }
  pooled /= static_cast<double>(f.pixel_count());
  const std::uint64_t tag = kind == BackboneKind::VisualOnly ? 0xD1 : 0x6E;
  return seeded_matrix(out_dim, 3 * d, derive_seed(seed, tag)) * pooled;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PcaResult {
  ImageD projection;  // H x W x k, unnormalized scores
  MatX basis;         // d x k, orthonormal columns
  VecX singular_values;  // k leading singular values of the centred matrix
  VecX mean;          // d, per-channel mean that was subtracted

  /// Projection min-max normalized per channel to [0, 1] for display.
  ImageD visualization() const { return normalize_channels(projection); }

  /// Rank-k reconstruction (mean re-added), H x W x d.
  FeatureImage reconstruct() const {
    const int d = static_cast<int>(basis.rows());
    const int k = static_cast<int>(basis.cols());
    FeatureImage out(projection.width, projection.height, d);
    for (std::size_t i = 0; i < projection.pixel_count(); ++i) {
      Eigen::Map<const VecX> s(projection.data.data() + i * k, k);
      Eigen::Map<VecX>(out.data.data() + i * d, d) = mean + basis * s;
    }
    return out;
  }
};

/// Rank-k PCA of the (H*W) x d feature matrix. The basis comes from the
/// symmetric eigendecomposition of the d x d scatter matrix, which equals
/// V Sigma^2 V^T of the centred matrix. Basis column signs are fixed so the
/// largest-magnitude entry of each column is positive.
inline PcaResult pca_project(const FeatureImage& f, int k = 3) {
  const int d = f.channels;
  const auto m = static_cast<Eigen::Index>(f.pixel_count());
  require(k >= 1, "pca_project: k must be >= 1");
  require(k <= d, "pca_project: k exceeds the feature dimension");
  require(m >= k, "pca_project: fewer pixels than components");

  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(
      f.data.data(), m, d);
  PcaResult r;
  r.mean = a.colwise().mean().transpose();
  const MatX centred = a.rowwise() - r.mean.transpose();
  const MatX scatter = centred.transpose() * centred;
  Eigen::SelfAdjointEigenSolver<MatX> eig(scatter);
  r.basis.resize(d, k);
  r.singular_values.resize(k);
  for (int j = 0; j < k; ++j) {
    const int src = d - 1 - j;  // eigenvalues ascend
    VecX col = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col[arg] < 0.0) col = -col;
    r.basis.col(j) = col;
    r.singular_values[j] = std::sqrt(std::max(eig.eigenvalues()[src], 0.0));
  }
  const MatX scores = centred * r.basis;
  r.projection = ImageD(f.width, f.height, k);
  for (Eigen::Index i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) r.projection.data[static_cast<std::size_t>(i) * k + j] = scores(i, j);
  return r;
}

}  // namespace spine
