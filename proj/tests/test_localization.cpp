// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0

#include "spine/localization.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

using namespace spine;
using namespace spine::oracle;

namespace {

VecX unit(int dim, int axis) {
  VecX v = VecX::Zero(dim);
  v[axis] = 1.0;
  return v;
}

VecX random_unit(Rng& rng, int dim) {
  VecX v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v.normalized();
}

}  // namespace

TEST(Relevancy, QueryEqualToMinimizingCanonicalGivesHalf) {
  const VecX q = unit(4, 0);
  const VecX f = VecX(Eigen::Vector4d(0.6, 0.0, 0.8, 0.0));
  const std::vector<VecX> canon{unit(4, 1), q, unit(4, 3)};
  EXPECT_EQ(relevancy_score(q, f, canon), 0.5);
}

TEST(Relevancy, AnalyticLogistic) {
  const std::vector<VecX> canon{unit(3, 1)};
  const double e = std::exp(1.0);
  EXPECT_NEAR(relevancy_score(unit(3, 0), unit(3, 0), canon), e / (1.0 + e), 1e-12);
  // Unnormalized inputs are normalized internally.
  const VecX q = 3.0 * unit(3, 0), f = 0.2 * unit(3, 0);
  EXPECT_NEAR(relevancy_score(q, f, std::vector<VecX>{5.0 * unit(3, 1)}), e / (1.0 + e), 1e-12);
}

TEST(Relevancy, BackgroundAndValidation) {
  const std::vector<VecX> canon{unit(3, 1)};
  EXPECT_EQ(relevancy_score(unit(3, 0), VecX::Zero(3), canon), 0.0);
  EXPECT_THROW(relevancy_score(unit(3, 0), unit(3, 0), std::vector<VecX>{}), InvalidArgument);
  EXPECT_THROW(relevancy_score(unit(3, 0), unit(4, 0), canon), InvalidArgument);
  EXPECT_THROW(QuerySet(VecX::Zero(3), canon), InvalidArgument);
}

TEST(Relevancy, MonotoneInQueryFeatureDot) {
  Rng rng(21);
  for (int t = 0; t < 1000; ++t) {
    const int dim = 2 + static_cast<int>(rng.index(7));
    const VecX f = random_unit(rng, dim);
    std::vector<VecX> canon;
    const std::size_t nc = 1 + rng.index(4);
    for (std::size_t i = 0; i < nc; ++i) canon.push_back(random_unit(rng, dim));
    const VecX q1 = random_unit(rng, dim), q2 = random_unit(rng, dim);
    const double d1 = q1.dot(f), d2 = q2.dot(f);
    const double s1 = relevancy_score(q1, f, canon), s2 = relevancy_score(q2, f, canon);
    ASSERT_GT(s1, 0.0);
    ASSERT_LT(s1, 1.0);
    if (std::abs(d1 - d2) < 1e-9) continue;
    EXPECT_EQ(d1 < d2, s1 < s2) << "trial " << t;
  }
}

TEST(Relevancy, CanonicalOrderAndMembership) {
  Rng rng(22);
  for (int t = 0; t < 200; ++t) {
    const VecX q = random_unit(rng, 6), f = random_unit(rng, 6);
    std::vector<VecX> canon{random_unit(rng, 6), random_unit(rng, 6), random_unit(rng, 6)};
    const double s = relevancy_score(q, f, canon);
    std::vector<VecX> reversed(canon.rbegin(), canon.rend());
    EXPECT_EQ(relevancy_score(q, f, reversed), s);
    canon.push_back(random_unit(rng, 6));
    EXPECT_LE(relevancy_score(q, f, canon), s);
  }
}

TEST(RelevancyMask, PrototypeQueryHighlightsItsClass) {
  const Scene s = generate_scene(SceneSpec{}, 0);
  const auto k = CameraIntrinsics::from_fov(48, 48, 55.0);
  const RenderOutput r = render_full(s, k, orbit_pose(40.0, 30.0, 3.2));
  const FeatureImage lang = extract_language_features(r.labels, 32, 1);
  int tested = 0;
  for (int c = 0; c < s.class_count(); ++c) {
    const RelevancyMask m = relevancy_mask(lang, class_query(c, 32, 1));
    ASSERT_FALSE(m.degenerate);
    double in = 0, out = 0;
    int nin = 0, nout = 0;
    for (std::size_t i = 0; i < m.values.data.size(); ++i) {
      ASSERT_GE(m.values.data[i], 0.0);
      ASSERT_LE(m.values.data[i], 1.0);
      if (r.labels.data[i] == c) {
        in += m.values.data[i];
        ++nin;
      } else {
        out += m.values.data[i];
        ++nout;
      }
    }
    if (nin == 0) continue;
    ++tested;
    EXPECT_GT(in / nin, out / nout) << "class " << c;
  }
  EXPECT_GE(tested, 4);
}

TEST(RelevancyMask, NormalizationIsInvertible) {
  const Scene s = generate_scene(SceneSpec{}, 0);
  const auto k = CameraIntrinsics::from_fov(24, 24, 55.0);
  const RenderOutput r = render_full(s, k, orbit_pose(0.0, 30.0, 3.2));
  const FeatureImage lang = extract_language_features(r.labels, 16, 1);
  const QuerySet q = class_query(1, 16, 1);
  const RelevancyMask m = relevancy_mask(lang, q);
  for (std::size_t i = 0; i < lang.pixel_count(); ++i) {
    Eigen::Map<const VecX> f(lang.data.data() + i * 16, 16);
    if (f.norm() == 0.0) continue;
    EXPECT_NEAR(m.denormalize(m.values.data[i]), relevancy_score(q, f), 1e-12);
  }
}

TEST(RelevancyMask, AllBackgroundIsDegenerate) {
  const FeatureImage empty(8, 6, 5);
  const RelevancyMask m = relevancy_mask(empty, class_query(0, 5, 1));
  EXPECT_TRUE(m.degenerate);
  for (double v : m.values.data) EXPECT_EQ(v, 0.0);
}

TEST(RelevancyMask, DifferentQueriesDiffer) {
  const Scene s = generate_scene(SceneSpec{}, 0);
  const auto k = CameraIntrinsics::from_fov(24, 24, 55.0);
  const RenderOutput r = render_full(s, k, orbit_pose(0.0, 30.0, 3.2));
  const FeatureImage lang = extract_language_features(r.labels, 16, 1);
  const RelevancyMask a = relevancy_mask(lang, class_query(0, 16, 1));
  const RelevancyMask b = relevancy_mask(lang, class_query(1, 16, 1));
  EXPECT_NE(a.values.data, b.values.data);
  EXPECT_EQ(a.values.data, relevancy_mask(lang, class_query(0, 16, 1)).values.data);
}

TEST(Ssim, IdenticalImagesAreExactlyOne) {
  Rng rng(30);
  const ImageD a = random_image(rng, 20, 17, 3);
  EXPECT_EQ(ssim(a, a), 1.0);
}

TEST(Ssim, MatchesNaiveReference) {
  Rng rng(31);
  const ImageD a = random_image(rng, 32, 32, 3);
  ImageD b = a;
  for (double& v : b.data) v = std::clamp(v + 0.2 * rng.normal(), 0.0, 1.0);
  EXPECT_NEAR(ssim(a, b), naive_ssim(a, b), 1e-6);
  const ImageD c = random_image(rng, 32, 32, 3);
  EXPECT_NEAR(ssim(a, c), naive_ssim(a, c), 1e-6);

  const ImageD g = random_image(rng, 16, 16, 1);
  ImageD neg = g;
  for (double& v : neg.data) v = 1.0 - v;
  EXPECT_NEAR(ssim(g, neg), naive_ssim(g, neg), 1e-6);
  EXPECT_LT(ssim(g, neg), 0.0);
}

TEST(Ssim, SymmetricAndValidated) {
  Rng rng(32);
  const ImageD a = random_image(rng, 14, 12, 2), b = random_image(rng, 14, 12, 2);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_THROW(ssim(a, random_image(rng, 12, 14, 2)), InvalidArgument);
  EXPECT_THROW(ssim(random_image(rng, 8, 8, 1), random_image(rng, 8, 8, 1)), InvalidArgument);
}

TEST(Psnr, SentinelAndClosedForm) {
  Rng rng(33);
  const ImageD a = random_image(rng, 9, 7, 3);
  EXPECT_EQ(psnr(a, a), 100.0);
  ImageD zero(10, 10, 1), tenth(10, 10, 1);
  for (double& v : tenth.data) v = 0.1;
  EXPECT_NEAR(psnr(zero, tenth), 20.0, 1e-9);
  const ImageD b = random_image(rng, 9, 7, 3);
  EXPECT_NEAR(psnr(a, b), naive_psnr(a, b), 1e-6);
  EXPECT_THROW(psnr(a, zero), InvalidArgument);
}

TEST(Colormap, EndpointsAndShape) {
  ImageD s(2, 1, 1);
  s(0, 0) = 0.0;
  s(1, 0) = 1.0;
  const ImageD c = apply_colormap(s);
  ASSERT_EQ(c.channels, 3);
  EXPECT_EQ(c(0, 0, 0), 0.267004);
  EXPECT_EQ(c(0, 0, 2), 0.329415);
  EXPECT_EQ(c(1, 0, 0), 0.993248);
  EXPECT_EQ(c(1, 0, 1), 0.906157);
  EXPECT_THROW(apply_colormap(ImageD(2, 2, 3)), InvalidArgument);
}

TEST(ScoreMask, PerfectAndConstantMasks) {
  const Scene s = generate_scene(SceneSpec{}, 0);
  const auto k = CameraIntrinsics::from_fov(32, 32, 55.0);
  const RenderOutput r = render_full(s, k, orbit_pose(10.0, 30.0, 3.2));
  const ImageD gt = class_mask(r.labels, r.labels(16, 16));
  const MaskScore perfect = score_mask(gt, gt);
  EXPECT_EQ(perfect.ssim, 1.0);
  EXPECT_EQ(perfect.psnr, 100.0);

  ImageD half(32, 32, 1);
  for (double& v : half.data) v = 0.5;
  const MaskScore m = score_mask(half, gt);
  const ImageD ca = apply_colormap(half), cb = apply_colormap(gt);
  EXPECT_NEAR(m.ssim, naive_ssim(ca, cb), 1e-6);
  EXPECT_NEAR(m.psnr, naive_psnr(ca, cb), 1e-6);
}

TEST(EvaluateLocalization, OneRowPerPoseAndClass) {
  const Scene s = generate_scene(SceneSpec{}, 0);
  FieldConfig fc;
  fc.grid.bounds = s.bounds;
  fc.grid.resolutions = {2, 4};
  fc.hidden = 8;
  fc.spatial_dim = 4;
  fc.language_dim = 8;
  const SemanticFieldParams field = SemanticFieldParams::init(fc, 0);
  const auto k = CameraIntrinsics::from_fov(16, 16, 55.0);
  const std::vector<PoseSE3> poses{orbit_pose(0.0, 30.0, 3.2), orbit_pose(120.0, 25.0, 3.2)};
  const auto rows = evaluate_localization(field, s, k, poses, 1);
  ASSERT_EQ(rows.size(), poses.size() * static_cast<std::size_t>(s.class_count()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].pose_id, static_cast<int>(i / s.class_count()));
    EXPECT_EQ(rows[i].label, static_cast<int>(i % s.class_count()));
    EXPECT_TRUE(std::isfinite(rows[i].ssim));
  }
  EXPECT_THROW(evaluate_localization(field, s, k, std::vector<PoseSE3>{}, 1), InvalidArgument);
}
