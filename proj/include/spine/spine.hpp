// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Full inversion: a coarse pose from the inverse model, then up to a few
// rounds of render, match and RANSAC-PnP starting from the current estimate.

#pragma once

#include "spine/distill.hpp"
#include "spine/features.hpp"
#include "spine/inverse.hpp"
#include "spine/pnp.hpp"
#include "spine/scene.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>

namespace spine {

/// Depth and feature image synthesized at a pose.
struct SynthesizedView {
  ImageD depth;
  FeatureImage features;
};

using ViewSynthesizer = std::function<SynthesizedView(const PoseSE3&)>;

/// Renders the scene and runs the backbone oracle on the rendered view.
inline ViewSynthesizer oracle_synthesizer(const Scene& scene, const CameraIntrinsics& k,
                                          BackboneKind kind, int dim, std::uint64_t seed,
                                          RenderConfig rc = {}) {
  return [&scene, k, kind, dim, seed, rc](const PoseSE3& pose) {
    const RenderOutput r = render_full(scene, k, pose, rc);
    return SynthesizedView{r.image.depth, extract_features(r.image, r.labels, kind, dim, seed)};
  };
}

/// Renders depth from the scene and spatial features from a distilled field.
inline ViewSynthesizer field_synthesizer(const Scene& scene, const SemanticFieldParams& field,
                                         const CameraIntrinsics& k, RenderConfig rc = {}) {
  return [&scene, &field, k, rc](const PoseSE3& pose) {
    const RGBDImage img = render_rgbd(scene, k, pose, rc);
    return SynthesizedView{img.depth, render_semantic_image(field, img, k, pose).spatial};
  };
}

enum class InversionStatus { FineOk, CoarseOnly, Failed };

inline std::string_view to_string(InversionStatus s) {
  switch (s) {
    case InversionStatus::FineOk: return "fine-ok";
    case InversionStatus::CoarseOnly: return "coarse-only";
    case InversionStatus::Failed: return "failed";
  }
  return "failed";
}

struct InversionConfig {
  MatchConfig match;
  RansacConfig ransac;
  int max_rounds = 3;
  /// Rounds stop early once the pose moves less than these amounts.
  double converged_rotation_deg = 1e-3;
  double converged_translation = 1e-5;
};

struct PoseErrors {
  double rotation_deg = std::numeric_limits<double>::quiet_NaN();
  double translation = std::numeric_limits<double>::quiet_NaN();
};

inline PoseErrors pose_errors(const PoseSE3& est, const PoseSE3& gt) {
  return {rotation_error_deg(est.rotation, gt.rotation),
          translation_error(est.translation, gt.translation)};
}

struct RefineResult {
  std::optional<PoseSE3> pose;
  int inliers = 0;
  int matches = 0;
  int rounds = 0;
  std::string message;
};

/// Render-match-solve from `init`. Each round re-renders at the latest pose.
/// A failure in the first round yields no pose; a later failure keeps the
/// pose of the last successful round.
inline RefineResult refine_pose(const FeatureImage& query, const ViewSynthesizer& synth,
                                const CameraIntrinsics& k, const PoseSE3& init,
                                const InversionConfig& cfg) {
  require(cfg.max_rounds >= 1, "refine_pose: max_rounds must be >= 1");
  RefineResult res;
  PoseSE3 current = init;
  for (int round = 0; round < cfg.max_rounds; ++round) {
    try {
      const SynthesizedView view = synth(current);
      const auto matches = match_features(query, view.features, view.depth, k, current, cfg.match);
      RansacConfig rc = cfg.ransac;
      rc.seed = derive_seed(cfg.ransac.seed, static_cast<std::uint64_t>(round));
      const RansacResult rr = ransac_pnp(matches, k, rc, current);
      const PoseErrors step = pose_errors(rr.pose, current);
      current = rr.pose;
      res.pose = current;
      res.inliers = static_cast<int>(rr.inliers.size());
      res.matches = static_cast<int>(matches.size());
      res.rounds = round + 1;
      if (step.rotation_deg < cfg.converged_rotation_deg &&
          step.translation < cfg.converged_translation)
        break;
    } catch (const Error& e) {
      res.message = e.what();
      break;
    }
  }
  return res;
}

struct InversionReport {
  PoseSE3 coarse;
  std::optional<PoseSE3> fine;
  std::optional<PoseSE3> ground_truth;
  PoseErrors coarse_errors;
  PoseErrors fine_errors;
  int inliers = 0;
  int matches = 0;
  int rounds = 0;
  InversionStatus status = InversionStatus::Failed;
  std::string message;

  /// Best available estimate: the fine pose when present.
  const PoseSE3& estimate() const { return fine ? *fine : coarse; }
};

inline InversionReport make_report(const PoseSE3& coarse, const RefineResult& fine,
                                   const std::optional<PoseSE3>& gt) {
  InversionReport rep;
  rep.coarse = coarse;
  rep.fine = fine.pose;
  rep.ground_truth = gt;
  rep.inliers = fine.inliers;
  rep.matches = fine.matches;
  rep.rounds = fine.rounds;
  rep.message = fine.message;
  rep.status = fine.pose ? InversionStatus::FineOk : InversionStatus::CoarseOnly;
  if (gt) {
    rep.coarse_errors = pose_errors(coarse, *gt);
    if (fine.pose) rep.fine_errors = pose_errors(*fine.pose, *gt);
  }
  return rep;
}

/// Coarse prediction from the query's global embedding followed by
/// refinement. Never throws for matching or RANSAC problems; those become
/// a coarse-only report.
inline InversionReport invert(const FeatureImage& query, BackboneKind kind,
                              const InverseModelParams& model, const ViewSynthesizer& synth,
                              const CameraIntrinsics& k, const InversionConfig& cfg,
                              const std::optional<PoseSE3>& gt = std::nullopt,
                              std::uint64_t embedding_seed = 0) {
  const VecX e = global_embedding(query, kind, model.config.embedding_dim, embedding_seed);
  PoseSE3 coarse;
  try {
    coarse = coarse_mode(coarse_predict(model, e));
  } catch (const Error& err) {
    InversionReport rep;
    rep.status = InversionStatus::Failed;
    rep.message = err.what();
    return rep;
  }
  return make_report(coarse, refine_pose(query, synth, k, coarse, cfg), gt);
}

}  // namespace spine
