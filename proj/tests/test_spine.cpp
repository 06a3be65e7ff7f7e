// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0

#include "spine/spine.hpp"

#include <gtest/gtest.h>

#include <vector>

using namespace spine;

namespace {

constexpr int kSize = 96;
constexpr int kDim = 128;
constexpr std::uint64_t kFeatureSeed = 1;
constexpr auto kKind = BackboneKind::VisualGeometry;

struct Fixture {
  Scene scene = generate_scene(SceneSpec{}, 0);
  CameraIntrinsics k = CameraIntrinsics::from_fov(kSize, kSize, 55.0);

  FeatureImage features_at(const PoseSE3& pose) const {
    const RenderOutput r = render_full(scene, k, pose);
    return extract_features(r.image, r.labels, kKind, kDim, kFeatureSeed);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

// Model trained on a handful of orbit views of the fixture scene.
struct TrainedModel {
  std::vector<PoseSE3> poses;
  std::vector<FeatureImage> features;
  InverseModelParams model;
};

const TrainedModel& trained_model() {
  static const TrainedModel t = [] {
    TrainedModel out;
    std::vector<InverseSample> data;
    for (int i = 0; i < 4; ++i) {
      const PoseSE3 p = orbit_pose(90.0 * i + 20.0, 30.0, 3.2);
      out.poses.push_back(p);
      out.features.push_back(fixture().features_at(p));
      data.push_back({global_embedding(out.features.back(), kKind, 64, kFeatureSeed), p});
    }
    InverseTrainConfig cfg;
    cfg.iterations = 800;
    cfg.learning_rate = 3e-3;
    out.model = train_inverse_model(data, {64, 64, 1}, cfg).params;
    return out;
  }();
  return t;
}

}  // namespace

TEST(RefinePose, RecoversFiveDegreeOffset) {
  const Fixture& f = fixture();
  const auto synth = oracle_synthesizer(f.scene, f.k, kKind, kDim, kFeatureSeed);
  const PoseSE3 gt = orbit_pose(70.0, 30.0, 3.2);
  const PoseSE3 init = perturb_pose(gt, 5.0, 0.05, 3);
  const RefineResult r = refine_pose(f.features_at(gt), synth, f.k, init, InversionConfig{});
  ASSERT_TRUE(r.pose.has_value()) << r.message;
  const PoseErrors e = pose_errors(*r.pose, gt);
  EXPECT_LT(e.rotation_deg, 0.5);
  EXPECT_LT(e.translation, 0.02);
  EXPECT_GE(r.rounds, 1);
  EXPECT_LE(r.rounds, 3);
  EXPECT_LE(r.inliers, r.matches);
}

TEST(RefinePose, ValidatesRounds) {
  const Fixture& f = fixture();
  const auto synth = oracle_synthesizer(f.scene, f.k, kKind, kDim, kFeatureSeed);
  InversionConfig cfg;
  cfg.max_rounds = 0;
  EXPECT_THROW(refine_pose(FeatureImage(kSize, kSize, kDim), synth, f.k, PoseSE3::identity(), cfg),
               InvalidArgument);
}

TEST(Invert, TrainingPoseIsRecovered) {
  const Fixture& f = fixture();
  const TrainedModel& t = trained_model();
  const auto synth = oracle_synthesizer(f.scene, f.k, kKind, kDim, kFeatureSeed);
  for (std::size_t i = 0; i < t.poses.size(); ++i) {
    const InversionReport rep =
        invert(t.features[i], kKind, t.model, synth, f.k, InversionConfig{}, t.poses[i], kFeatureSeed);
    ASSERT_EQ(rep.status, InversionStatus::FineOk) << rep.message;
    EXPECT_LT(rep.fine_errors.rotation_deg, 0.1) << "pose " << i;
    EXPECT_LT(rep.fine_errors.translation, 0.005) << "pose " << i;
    EXPECT_LE(rep.fine_errors.rotation_deg, rep.coarse_errors.rotation_deg + 1e-9);
    EXPECT_EQ(&rep.estimate(), &*rep.fine);
  }
}

TEST(Invert, FlatQueryFallsBackToCoarse) {
  const Fixture& f = fixture();
  const TrainedModel& t = trained_model();
  const auto synth = oracle_synthesizer(f.scene, f.k, kKind, kDim, kFeatureSeed);
  const FeatureImage flat(kSize, kSize, kDim);
  const InversionReport rep =
      invert(flat, kKind, t.model, synth, f.k, InversionConfig{}, t.poses[0], kFeatureSeed);
  EXPECT_EQ(rep.status, InversionStatus::CoarseOnly);
  EXPECT_FALSE(rep.fine.has_value());
  EXPECT_FALSE(rep.message.empty());
  EXPECT_EQ(rep.rounds, 0);
  EXPECT_TRUE(std::isfinite(rep.coarse_errors.rotation_deg));
  EXPECT_TRUE(std::isnan(rep.fine_errors.rotation_deg));
  EXPECT_EQ(&rep.estimate(), &rep.coarse);
}

TEST(Invert, EmbeddingMismatchIsFailure) {
  const Fixture& f = fixture();
  const auto synth = oracle_synthesizer(f.scene, f.k, kKind, kDim, kFeatureSeed);
  InverseModelParams model = InverseModelParams::init({64, 8, 1}, 0);
  model.config.embedding_dim = 32;
  const InversionReport rep =
      invert(FeatureImage(kSize, kSize, kDim), kKind, model, synth, f.k, InversionConfig{});
  EXPECT_EQ(rep.status, InversionStatus::Failed);
  EXPECT_FALSE(rep.message.empty());
}

TEST(MakeReport, ErrorsOnlyWithGroundTruth) {
  const PoseSE3 coarse = orbit_pose(10.0, 20.0, 3.0);
  RefineResult fine;
  fine.pose = orbit_pose(12.0, 20.0, 3.0);
  fine.inliers = 7;
  fine.matches = 9;
  fine.rounds = 2;
  const InversionReport without = make_report(coarse, fine, std::nullopt);
  EXPECT_EQ(without.status, InversionStatus::FineOk);
  EXPECT_TRUE(std::isnan(without.coarse_errors.rotation_deg));
  EXPECT_TRUE(std::isnan(without.fine_errors.translation));

  const InversionReport with = make_report(coarse, fine, coarse);
  EXPECT_DOUBLE_EQ(with.coarse_errors.rotation_deg, 0.0);
  EXPECT_NEAR(with.fine_errors.rotation_deg, 2.0, 1e-9);
  EXPECT_EQ(with.inliers, 7);
  EXPECT_EQ(with.matches, 9);
  EXPECT_EQ(with.rounds, 2);
  EXPECT_EQ(to_string(with.status), "fine-ok");
  EXPECT_EQ(to_string(InversionStatus::CoarseOnly), "coarse-only");
  EXPECT_EQ(to_string(InversionStatus::Failed), "failed");
}
