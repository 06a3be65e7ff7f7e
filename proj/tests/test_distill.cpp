// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0

#include "spine/distill.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace spine;

namespace {

FieldConfig tiny_config() {
  FieldConfig c;
  c.grid.resolutions = {1, 2};
  c.grid.features_per_level = 2;
  c.grid.bounds = Aabb{Vec3::Constant(-1.0), Vec3::Constant(1.0)};
  c.hidden = 4;
  c.spatial_dim = 3;
  c.language_dim = 3;
  c.grid_init_amplitude = 0.5;
  return c;
}

VecX random_vec(Rng& rng, int n) {
  VecX v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

std::vector<DistillSample> random_batch(Rng& rng, int n, const FieldConfig& c) {
  std::vector<DistillSample> b;
  for (int i = 0; i < n; ++i)
    b.push_back({Vec3(rng.uniform(-0.95, 0.95), rng.uniform(-0.95, 0.95), rng.uniform(-0.95, 0.95)),
                 random_vec(rng, c.spatial_dim), random_vec(rng, c.language_dim)});
  return b;
}

Scene single_primitive_scene() {
  Scene s;
  s.bounds = Aabb{Vec3::Constant(-0.6), Vec3::Constant(0.6)};
  GaussianPrimitive g;
  g.scale = Vec3(0.25, 0.18, 0.2);
  g.opacity = 0.95;
  g.color = Vec3(0.8, 0.3, 0.2);
  g.label = 2;
  s.primitives = {g};
  return s;
}

std::vector<TrainingView> views_of(const Scene& s, int size, int dim_s, int dim_l) {
  const auto k = CameraIntrinsics::from_fov(size, size, 40.0);
  std::vector<TrainingView> views;
  for (int i = 0; i < 4; ++i) {
    const PoseSE3 pose = orbit_pose(90.0 * i, 25.0, 2.0);
    const RenderOutput r = render_full(s, k, pose);
    views.push_back({pose, k, r.image,
                     extract_features(r.image, r.labels, BackboneKind::VisualOnly, dim_s, 1),
                     extract_language_features(r.labels, dim_l, 1)});
  }
  return views;
}

}  // namespace

TEST(DistillLoss, PerfectFit) {
  Rng rng(1);
  FeatureImage s(3, 2, 4), l(3, 2, 2);
  for (double& v : s.data) v = rng.normal();
  for (double& v : l.data) v = rng.normal();
  const LossReport r = distill_loss(s, l, s, l);
  EXPECT_EQ(r.frobenius, 0.0);
  EXPECT_EQ(r.terms, 12u);
  EXPECT_NEAR(r.total, -12.0, 1e-6);
  EXPECT_NEAR(r.shifted({}), 0.0, 1e-6);
}

TEST(DistillLoss, ZeroPrediction) {
  Rng rng(2);
  FeatureImage gs(2, 2, 3), gl(2, 2, 2);
  for (double& v : gs.data) v = rng.normal();
  for (double& v : gl.data) v = rng.normal();
  const FeatureImage zs(2, 2, 3), zl(2, 2, 2);
  const LossReport r = distill_loss(zs, zl, gs, gl);
  double energy = 0.0;
  for (double v : gs.data) energy += v * v;
  for (double v : gl.data) energy += v * v;
  EXPECT_EQ(r.cosine, 0.0);
  EXPECT_NEAR(r.total, 1e-2 * energy, 1e-12);
}

TEST(DistillLoss, TwoPixelHandComputation) {
  FeatureImage rs(2, 1, 2), gs(2, 1, 2);
  rs(0, 0, 0) = 1.0;
  rs(1, 0, 1) = 2.0;
  gs(0, 0, 0) = 1.0;
  gs(0, 0, 1) = 1.0;
  gs(1, 0, 1) = 1.0;
  const FeatureImage zl(2, 1, 2);
  const LossReport r = distill_loss(rs, zl, gs, zl);
  // Pixel 0: squared error 1, csim 1/sqrt(2). Pixel 1: squared error 1, csim 1.
  const double csim = 1.0 / (std::sqrt(2.0) + kCosineEps) + 2.0 / (2.0 + kCosineEps);
  EXPECT_DOUBLE_EQ(r.frobenius, 2.0);
  EXPECT_NEAR(r.cosine, csim, 1e-15);
  EXPECT_NEAR(r.total, 0.02 - csim, 1e-15);
  EXPECT_EQ(r.terms, 2u);
}

TEST(DistillLoss, PixelPermutationInvariance) {
  Rng rng(3);
  FeatureImage rs(4, 3, 5), rl(4, 3, 2), gs(4, 3, 5), gl(4, 3, 2);
  for (auto* f : {&rs, &rl, &gs, &gl})
    for (double& v : f->data) v = rng.normal();
  std::vector<std::size_t> perm(12);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = (i * 5 + 7) % 12;
  auto permute = [&](const FeatureImage& f) {
    FeatureImage out(f.width, f.height, f.channels);
    for (std::size_t i = 0; i < perm.size(); ++i)
      for (int c = 0; c < f.channels; ++c)
        out.data[i * f.channels + c] = f.data[perm[i] * f.channels + c];
    return out;
  };
  const LossReport a = distill_loss(rs, rl, gs, gl);
  const LossReport b = distill_loss(permute(rs), permute(rl), permute(gs), permute(gl));
  EXPECT_NEAR(a.total, b.total, 1e-12);
}

TEST(DistillLoss, ShapeMismatchThrows) {
  EXPECT_THROW(distill_loss(FeatureImage(2, 2, 3), FeatureImage(2, 2, 2), FeatureImage(2, 2, 4),
                            FeatureImage(2, 2, 2)),
               InvalidArgument);
}

TEST(FieldEval, VertexValuesAndLinearSegments) {
  FieldConfig c = tiny_config();
  const SemanticFieldParams p = SemanticFieldParams::init(c, 4);
  // At a vertex of every level the encoding is that vertex's stored value.
  const VecX e = p.grid.encode(Vec3(1.0, -1.0, 1.0));
  for (int l = 0; l < c.grid.levels(); ++l) {
    const int n = c.grid.resolutions[l];
    const std::size_t v = p.grid.vertex_index(l, n, 0, n);
    for (int j = 0; j < 2; ++j) EXPECT_EQ(e[l * 2 + j], p.grid.values[l][v * 2 + j]);
  }
  // Inside one finest cell the encoding is linear along each axis.
  const Vec3 a(0.1, 0.2, 0.3);
  for (int axis = 0; axis < 3; ++axis) {
    Vec3 b = a;
    b[axis] += 0.6;
    const VecX mid = p.grid.encode(0.5 * (a + b));
    const VecX q = p.grid.encode(0.75 * a + 0.25 * b);
    EXPECT_LT((mid - 0.5 * (p.grid.encode(a) + p.grid.encode(b))).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((q - (0.75 * p.grid.encode(a) + 0.25 * p.grid.encode(b))).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(FieldEval, ZeroHeadsGiveZeroFeatures) {
  SemanticFieldParams p = SemanticFieldParams::init(tiny_config(), 5);
  p.head_s.layers.back().weight.setZero();
  p.head_s.layers.back().bias.setZero();
  const FieldOutput o = field_eval(p, Vec3(0.3, -0.2, 0.1));
  EXPECT_EQ(o.spatial.norm(), 0.0);
  EXPECT_GT(o.language.norm(), 0.0);
  EXPECT_EQ(o.spatial.size(), 3);
}

TEST(LossGradient, MatchesCentralDifferences) {
  const FieldConfig c = tiny_config();
  SemanticFieldParams p = SemanticFieldParams::init(c, 6);
  Rng rng(7);
  const auto batch = random_batch(rng, 6, c);
  SemanticFieldParams grad = p.zeros_like();
  loss_gradient(p, batch, grad);
  const std::vector<double> analytic = grad.flatten();
  std::vector<double> flat = p.flatten();

  // Block boundaries: grid levels, then each head's weight/bias pairs.
  std::vector<std::size_t> block_end;
  std::size_t acc = 0;
  p.visit([&](const double*, std::size_t n) { block_end.push_back(acc += n); });

  constexpr double h = 1e-4;
  std::size_t block = 0;
  double worst = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    while (i >= block_end[block]) ++block;
    const double orig = flat[i];
    flat[i] = orig + h;
    p.unflatten(flat);
    const double up = batch_loss(p, batch).total;
    flat[i] = orig - h;
    p.unflatten(flat);
    const double down = batch_loss(p, batch).total;
    flat[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = std::abs(analytic[i] - numeric) / std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
    worst = std::max(worst, rel);
    EXPECT_LT(rel, 1e-4) << "parameter " << i << " in block " << block;
  }
  p.unflatten(flat);
  EXPECT_EQ(block, block_end.size() - 1);
  EXPECT_LT(worst, 1e-4);
}

TEST(LossGradient, ZeroAtPerfectFitWithoutCosine) {
  const FieldConfig c = tiny_config();
  const SemanticFieldParams p = SemanticFieldParams::init(c, 8);
  Rng rng(9);
  auto batch = random_batch(rng, 4, c);
  for (auto& s : batch) {
    const FieldOutput o = field_eval(p, s.point);
    s.gt_s = o.spatial;
    s.gt_l = o.language;
  }
  SemanticFieldParams grad = p.zeros_like();
  loss_gradient(p, batch, grad, {1e-2, 0.0});
  for (double g : grad.flatten()) EXPECT_EQ(g, 0.0);
}

TEST(LossGradient, AdditiveOverDisjointBatches) {
  const FieldConfig c = tiny_config();
  const SemanticFieldParams p = SemanticFieldParams::init(c, 10);
  Rng rng(11);
  const auto a = random_batch(rng, 3, c);
  const auto b = random_batch(rng, 4, c);
  std::vector<DistillSample> ab = a;
  ab.insert(ab.end(), b.begin(), b.end());
  SemanticFieldParams ga = p.zeros_like(), gb = p.zeros_like(), gab = p.zeros_like();
  loss_gradient(p, a, ga);
  loss_gradient(p, b, gb);
  loss_gradient(p, ab, gab);
  const auto fa = ga.flatten(), fb = gb.flatten(), fab = gab.flatten();
  for (std::size_t i = 0; i < fab.size(); ++i) EXPECT_NEAR(fab[i], fa[i] + fb[i], 1e-12);
}

TEST(LossGradient, LossMatchesBatchLoss) {
  const FieldConfig c = tiny_config();
  const SemanticFieldParams p = SemanticFieldParams::init(c, 12);
  Rng rng(13);
  const auto batch = random_batch(rng, 5, c);
  SemanticFieldParams g = p.zeros_like();
  EXPECT_DOUBLE_EQ(loss_gradient(p, batch, g).total, batch_loss(p, batch).total);
}

TEST(TrainField, SinglePrimitiveConverges) {
  const Scene s = single_primitive_scene();
  const auto views = views_of(s, 32, 16, 8);
  FieldConfig fc;
  fc.grid.bounds = s.bounds;
  fc.spatial_dim = 16;
  fc.language_dim = 8;
  TrainConfig tc;
  tc.iterations = 500;
  const TrainResult r = train_field(views, fc, tc);
  ASSERT_EQ(r.loss_trace.size(), 500u);
  EXPECT_LT(r.final.shifted(tc.weights), 0.1 * r.initial.shifted(tc.weights));
}

TEST(TrainField, DeterministicPerSeed) {
  const Scene s = single_primitive_scene();
  const auto views = views_of(s, 16, 8, 4);
  FieldConfig fc;
  fc.grid.bounds = s.bounds;
  fc.spatial_dim = 8;
  fc.language_dim = 4;
  fc.hidden = 8;
  TrainConfig tc;
  tc.iterations = 40;
  tc.seed = 3;
  const TrainResult a = train_field(views, fc, tc);
  const TrainResult b = train_field(views, fc, tc);
  EXPECT_EQ(a.params.flatten(), b.params.flatten());
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  tc.seed = 4;
  EXPECT_NE(train_field(views, fc, tc).params.flatten(), a.params.flatten());
}

TEST(TrainField, Validation) {
  const Scene s = single_primitive_scene();
  auto views = views_of(s, 16, 8, 4);
  FieldConfig fc;
  fc.grid.bounds = s.bounds;
  fc.spatial_dim = 8;
  fc.language_dim = 4;
  TrainConfig tc;
  tc.iterations = 5;
  EXPECT_THROW(train_field({views[0]}, fc, tc), InvalidArgument);
  fc.spatial_dim = 9;
  EXPECT_THROW(train_field(views, fc, tc), InvalidArgument);
}

TEST(TrainField, NonFiniteTargetsReportFailureWithTrace) {
  const Scene s = single_primitive_scene();
  auto views = views_of(s, 16, 8, 4);
  for (auto& v : views)
    for (double& x : v.gt_s.data) x = std::nan("");
  FieldConfig fc;
  fc.grid.bounds = s.bounds;
  fc.spatial_dim = 8;
  fc.language_dim = 4;
  TrainConfig tc;
  tc.iterations = 5;
  try {
    train_field(views, fc, tc);
    FAIL() << "expected TrainingFailure";
  } catch (const TrainingFailure& e) {
    ASSERT_EQ(e.trace().size(), 1u);
    EXPECT_TRUE(std::isnan(e.trace()[0]));
  }
}
