// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0

#include "spine/features.hpp"
#include "spine/gff.hpp"
#include "spine/scene.hpp"

#include <gtest/gtest.h>

namespace spine {
namespace {

RGBDImage flat_image(int w, int h, double depth, const Vec3& rgb) {
  RGBDImage img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.depth(x, y) = depth;
      for (int c = 0; c < 3; ++c) img.rgb(x, y, c) = rgb[c];
    }
  return img;
}

double max_abs_diff(const double* a, const double* b, int n) {
  double m = 0.0;
  for (int i = 0; i < n; ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(GeometryChannels, ConstantDepthIsFlat) {
  const ImageD depth(10, 8, 1, 2.5);
  const ImageD g = geometry_channels(depth, 8.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 10; ++x) {
      EXPECT_EQ(g(x, y, 0), 0.0);
      EXPECT_EQ(g(x, y, 1), 0.0);
      EXPECT_EQ(g(x, y, 2), 0.0);
      EXPECT_EQ(g(x, y, 3), 1.0);
    }
}

TEST(ExtractFeatures, UniformInputGivesConstantFeatures) {
  const RGBDImage img = flat_image(12, 12, 2.0, Vec3(0.3, 0.6, 0.9));
  const LabelMap labels(12, 12, 1, 2);
  for (auto kind : {BackboneKind::VisualOnly, BackboneKind::VisualGeometry}) {
    const FeatureImage f = extract_features(img, labels, kind, 16, 4);
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) EXPECT_LT(max_abs_diff(f.pixel(x, y), f.pixel(0, 0), 16), 1e-12);
  }
  // Without depth structure the geometry term is the same constant
  // everywhere, so the two backbones differ by a constant vector.
  const FeatureImage v = extract_features(img, labels, BackboneKind::VisualOnly, 16, 4);
  const FeatureImage g = extract_features(img, labels, BackboneKind::VisualGeometry, 16, 4);
  const MatX proj = seeded_matrix(16, 4, derive_seed(4, 0x6E0));
  const VecX expected = OracleConfig{}.geometry_amplitude * proj.col(3);
  for (int c = 0; c < 16; ++c) EXPECT_NEAR(g(5, 5, c) - v(5, 5, c), expected[c], 1e-12);
}

TEST(ExtractFeatures, TwoLabelImageIsPiecewiseConstant) {
  const RGBDImage img = flat_image(16, 8, 2.0, Vec3(0.5, 0.5, 0.5));
  LabelMap labels(16, 8, 1, 0);
  for (int y = 0; y < 8; ++y)
    for (int x = 8; x < 16; ++x) labels(x, y) = 1;
  const FeatureImage f = extract_features(img, labels, BackboneKind::VisualOnly, 8, 9);
  const VecX p0 = class_prototype(0, 8, 9), p1 = class_prototype(1, 8, 9);
  // Grey input makes the colour term vanish; pixels beyond the blur radius
  // carry the bare prototype.
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x <= 5; ++x) EXPECT_LT(max_abs_diff(f.pixel(x, y), p0.data(), 8), 1e-12);
    for (int x = 10; x < 16; ++x) EXPECT_LT(max_abs_diff(f.pixel(x, y), p1.data(), 8), 1e-12);
    // Boundary pixels blend the two prototypes.
    EXPECT_GT(max_abs_diff(f.pixel(7, y), p0.data(), 8), 1e-3);
    EXPECT_GT(max_abs_diff(f.pixel(8, y), p1.data(), 8), 1e-3);
  }
}

TEST(ExtractFeatures, BackgroundPrototypeIsZero) {
  EXPECT_EQ(class_prototype(kBackgroundLabel, 8, 1).norm(), 0.0);
  EXPECT_NEAR(class_prototype(3, 8, 1).norm(), 1.0, 1e-12);
  EXPECT_NE(class_prototype(3, 8, 1), class_prototype(4, 8, 1));
}

TEST(ExtractFeatures, DeterministicAndValidated) {
  const Scene s = generate_scene(SceneSpec{}, 0);
  const auto k = CameraIntrinsics::from_fov(24, 24, 55.0);
  const RenderOutput r = render_full(s, k, orbit_pose(20.0, 30.0, 3.2));
  EXPECT_EQ(extract_features(r.image, r.labels, BackboneKind::VisualGeometry, 32, 1),
            extract_features(r.image, r.labels, BackboneKind::VisualGeometry, 32, 1));
  EXPECT_NE(extract_features(r.image, r.labels, BackboneKind::VisualGeometry, 32, 1),
            extract_features(r.image, r.labels, BackboneKind::VisualGeometry, 32, 2));
  const LabelMap wrong(23, 24, 1, 0);
  EXPECT_THROW(extract_features(r.image, wrong, BackboneKind::VisualOnly, 32, 1), InvalidArgument);
  EXPECT_THROW(extract_features(r.image, r.labels, BackboneKind::VisualOnly, 2, 1), InvalidArgument);
}

TEST(ExtractFeatures, GeometryBackboneHasMoreGradientEnergy) {
  const Scene s = generate_scene(SceneSpec{}, 0);
  const auto k = CameraIntrinsics::from_fov(48, 48, 55.0);
  for (double az : {0.0, 120.0, 240.0}) {
    const RenderOutput r = render_full(s, k, orbit_pose(az, 30.0, 3.2));
    auto energy = [&](BackboneKind kind) {
      const ImageD m = sobel(extract_features(r.image, r.labels, kind, 32, 1)).magnitude;
      double e = 0.0;
      for (double v : m.data) e += v * v;
      return e / static_cast<double>(m.data.size());
    };
    EXPECT_GT(energy(BackboneKind::VisualGeometry), energy(BackboneKind::VisualOnly)) << "az " << az;
  }
}

TEST(ParseBackbone, Names) {
  EXPECT_EQ(parse_backbone("visual"), BackboneKind::VisualOnly);
  EXPECT_EQ(parse_backbone("geom"), BackboneKind::VisualGeometry);
  EXPECT_EQ(to_string(BackboneKind::VisualGeometry), "geom");
  EXPECT_THROW(parse_backbone("clip"), InvalidArgument);
}

TEST(GlobalEmbedding, ZeroAndHomogeneity) {
  FeatureImage zero(6, 5, 8);
  EXPECT_EQ(global_embedding(zero, BackboneKind::VisualOnly).norm(), 0.0);
  Rng rng(3);
  FeatureImage f(6, 5, 8);
  for (double& v : f.data) v = rng.normal();
  FeatureImage scaled = f;
  for (double& v : scaled.data) v *= 2.5;
  const VecX a = global_embedding(f, BackboneKind::VisualGeometry);
  const VecX b = global_embedding(scaled, BackboneKind::VisualGeometry);
  EXPECT_EQ(a.size(), kDefaultEmbeddingDim);
  EXPECT_LT((b - 2.5 * a).cwiseAbs().maxCoeff(), 1e-12);
  for (double& v : scaled.data) v *= -1.0;
  const VecX c = global_embedding(scaled, BackboneKind::VisualGeometry);
  EXPECT_LT((c + 2.5 * a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GlobalEmbedding, Additive) {
  Rng rng(4);
  FeatureImage f(7, 6, 5), g(7, 6, 5);
  for (double& v : f.data) v = rng.normal();
  for (double& v : g.data) v = rng.normal();
  FeatureImage sum = f;
  for (std::size_t i = 0; i < sum.data.size(); ++i) sum.data[i] += g.data[i];
  const VecX lhs = global_embedding(sum, BackboneKind::VisualOnly);
  const VecX rhs = global_embedding(f, BackboneKind::VisualOnly) +
                   global_embedding(g, BackboneKind::VisualOnly);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GlobalEmbedding, GradientBlockSeesHorizontalRamp) {
  // A ramp along x has zero mean after centring but a nonzero x-gradient.
  FeatureImage ramp(9, 4, 3);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 9; ++x) ramp(x, y, 1) = x - 4.0;
  EXPECT_GT(global_embedding(ramp, BackboneKind::VisualOnly).norm(), 0.0);
  FeatureImage flipped = ramp;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 9; ++x) flipped(x, y, 1) = 4.0 - x;
  const VecX a = global_embedding(ramp, BackboneKind::VisualOnly);
  const VecX b = global_embedding(flipped, BackboneKind::VisualOnly);
  EXPECT_LT((a + b).cwiseAbs().maxCoeff(), 1e-12);
}

VecX view_embedding(const Scene& s, const CameraIntrinsics& k, double az, BackboneKind kind) {
  const RenderOutput r = render_full(s, k, orbit_pose(az, 30.0, 3.2));
  return global_embedding(extract_features(r.image, r.labels, kind, 64, 1), kind);
}

double cosine(const VecX& a, const VecX& b) { return a.dot(b) / (a.norm() * b.norm()); }

TEST(GlobalEmbedding, DistinguishesDistantViews) {
  const Scene s = generate_scene(SceneSpec{}, 0);
  const auto k = CameraIntrinsics::from_fov(48, 48, 55.0);
  const auto kind = BackboneKind::VisualOnly;
  EXPECT_LT(cosine(view_embedding(s, k, 0.0, kind), view_embedding(s, k, 60.0, kind)), 0.99);
}

TEST(GlobalEmbedding, SimilarityFallsWithViewSeparation) {
  const Scene s = generate_scene(SceneSpec{}, 0);
  const auto k = CameraIntrinsics::from_fov(48, 48, 55.0);
  for (auto kind : {BackboneKind::VisualOnly, BackboneKind::VisualGeometry})
    for (double az = 0.0; az < 360.0; az += 30.0) {
      const VecX e = view_embedding(s, k, az, kind);
      EXPECT_LT(cosine(e, view_embedding(s, k, az + 60.0, kind)),
                cosine(e, view_embedding(s, k, az + 5.0, kind)))
          << to_string(kind) << " az " << az;
    }
}

FeatureImage random_features(int w, int h, int d, std::uint64_t seed) {
  Rng rng(seed);
  FeatureImage f(w, h, d);
  for (double& v : f.data) v = rng.normal();
  return f;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMat as_matrix(const FeatureImage& f) {
  return Eigen::Map<const RowMat>(f.data.data(), static_cast<Eigen::Index>(f.pixel_count()), f.channels);
}

TEST(Pca, RankOneEnergy) {
  Rng rng(1);
  VecX u(32 * 32), v(16);
  for (auto& x : u) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  FeatureImage f(32, 32, 16);
  Eigen::Map<RowMat>(f.data.data(), 32 * 32, 16) = u * v.transpose();
  const PcaResult p = pca_project(f, 3);
  const double total = p.singular_values.squaredNorm();
  EXPECT_GE(p.singular_values[0] * p.singular_values[0] / total, 0.999);
}

TEST(Pca, MatchesDenseSvdOracle) {
  const FeatureImage f = random_features(32, 32, 16, 5);
  const RowMat a = as_matrix(f);
  const RowMat centred = a.rowwise() - a.colwise().mean();
  Eigen::JacobiSVD<MatX> svd(centred, Eigen::ComputeThinU | Eigen::ComputeThinV);
  for (int k : {1, 3, 8}) {
    const PcaResult p = pca_project(f, k);
    for (int j = 0; j < k; ++j) EXPECT_NEAR(p.singular_values[j], svd.singularValues()[j], 1e-9);
    // Eckart-Young optimum: sum of the discarded squared singular values.
    const double optimum = svd.singularValues().tail(16 - k).squaredNorm();
    const double err = (as_matrix(p.reconstruct()) - a).squaredNorm();
    EXPECT_NEAR(err, optimum, 1e-6 * optimum);
    const MatX gram = p.basis.transpose() * p.basis;
    EXPECT_LT((gram - MatX::Identity(k, k)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Pca, FullRankReconstructionIsExact) {
  const FeatureImage f = random_features(9, 7, 3, 8);
  const PcaResult p = pca_project(f, 3);
  EXPECT_LT((as_matrix(p.reconstruct()) - as_matrix(f)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Pca, VisualizationInUnitRangeAndErrors) {
  const FeatureImage f = random_features(8, 8, 5, 2);
  const ImageD vis = pca_project(f, 3).visualization();
  for (double v : vis.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(pca_project(f, 6), InvalidArgument);
  EXPECT_THROW(pca_project(f, 0), InvalidArgument);
  EXPECT_EQ(pca_project(f, 3).projection, pca_project(f, 3).projection);
}

}  // namespace
}  // namespace spine
