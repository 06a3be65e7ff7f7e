// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Relevancy-based semantic localization and the image metrics used to score
// it against ground-truth masks.

#pragma once

#include "spine/colormap_data.hpp"
#include "spine/common.hpp"
#include "spine/distill.hpp"
#include "spine/features.hpp"
#include "spine/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace spine {

/// A query embedding plus the canonical "generic" embeddings it competes
/// against. Vectors are stored unit-normalized.
struct QuerySet {
  VecX query;
  std::vector<VecX> canonical;

  QuerySet() = default;
  QuerySet(VecX q, std::vector<VecX> canon) : query(std::move(q)), canonical(std::move(canon)) {
    require(query.size() > 0 && query.norm() > 0.0, "QuerySet: query must be nonzero");
    query.normalize();
    for (auto& c : canonical) {
      require(c.size() == query.size(), "QuerySet: canonical dimension mismatch");
      require(c.norm() > 0.0, "QuerySet: canonical vectors must be nonzero");
      c.normalize();
    }
  }
};

/// Seeded stand-ins for generic prompts such as "object" or "stuff".
inline std::vector<VecX> canonical_embeddings(int dim, std::uint64_t seed, int count = 3) {
  std::vector<VecX> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, 0xCA40 + static_cast<std::uint64_t>(i)));
    VecX v(dim);
    for (int j = 0; j < dim; ++j) v[j] = rng.normal();
    out.push_back(v.normalized());
  }
  return out;
}

/// Query set for one class: its language prototype against the canonicals.
inline QuerySet class_query(int label, int dim, std::uint64_t seed) {
  return {language_prototype(label, dim, seed), canonical_embeddings(dim, seed)};
}

/// min_i exp(q.f) / (exp(f.c_i) + exp(q.f)) over the canonical list. Inputs
/// are normalized internally; a zero feature scores 0.
inline double relevancy_score(const VecX& query, const VecX& feature,
                              std::span<const VecX> canonical) {
  require(!canonical.empty(), "relevancy_score: canonical list is empty");
  require(query.size() == feature.size(), "relevancy_score: dimension mismatch");
  const double fn = feature.norm();
  if (fn == 0.0) return 0.0;
  const double qn = query.norm();
  require(qn > 0.0, "relevancy_score: query must be nonzero");
  const VecX f = feature / fn;
  const double qf = query.dot(f) / qn;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : canonical) {
    require(c.size() == f.size(), "relevancy_score: canonical dimension mismatch");
    const double cf = c.dot(f) / c.norm();
    // exp(qf) / (exp(cf) + exp(qf)) written as a logistic for stability.
    best = std::min(best, 1.0 / (1.0 + std::exp(cf - qf)));
  }
  return best;
}

inline double relevancy_score(const QuerySet& q, const VecX& feature) {
  return relevancy_score(q.query, feature, q.canonical);
}

struct RelevancyMask {
  ImageD values;  // H x W x 1 in [0, 1]
  double min = 0.0;
  double max = 0.0;
  bool degenerate = false;

  /// Raw score for a normalized value (inverse of the min-max map).
  double denormalize(double v) const { return min + v * (max - min); }
};

/// Per-pixel relevancy of a language feature image, min-max normalized over
/// foreground pixels (nonzero features). Background stays 0.
inline RelevancyMask relevancy_mask(const FeatureImage& language, const QuerySet& q) {
  require(language.channels == q.query.size(), "relevancy_mask: dimension mismatch");
  RelevancyMask m{ImageD(language.width, language.height, 1)};
  ImageD raw(language.width, language.height, 1);
  std::vector<bool> fg(language.pixel_count(), false);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < language.pixel_count(); ++i) {
    Eigen::Map<const VecX> f(language.data.data() + i * language.channels, language.channels);
    if (f.norm() == 0.0) continue;
    fg[i] = true;
    raw.data[i] = relevancy_score(q, f);
    lo = std::min(lo, raw.data[i]);
    hi = std::max(hi, raw.data[i]);
  }
  if (!(hi > lo)) {
    m.degenerate = true;
    return m;
  }
  m.min = lo;
  m.max = hi;
  for (std::size_t i = 0; i < raw.data.size(); ++i)
    if (fg[i]) m.values.data[i] = (raw.data[i] - lo) / (hi - lo);
  return m;
}

inline RelevancyMask relevancy_mask(const SemanticFieldParams& field, const Scene& scene,
                                    const CameraIntrinsics& k, const PoseSE3& pose,
                                    const QuerySet& q) {
  return relevancy_mask(render_semantic_image(field, scene, k, pose).language, q);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr double kPsnrCap = 100.0;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

namespace detail {

inline std::array<double, kSsimWindow> ssim_kernel() {
  std::array<double, kSsimWindow> k{};
  double s = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    k[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

}  // namespace detail

/// Gaussian-window SSIM (11 x 11, sigma 1.5) averaged over every valid
/// window position and channel. Images must be at least 11 x 11.
inline double ssim(const ImageD& a, const ImageD& b) {
  require(a.same_shape(b), "ssim: shape mismatch");
  require(a.width >= kSsimWindow && a.height >= kSsimWindow, "ssim: image smaller than window");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto k = detail::ssim_kernel();
  const int nx = a.width - kSsimWindow + 1, ny = a.height - kSsimWindow + 1;
  double total = 0.0;
  for (int c = 0; c < a.channels; ++c)
    for (int y0 = 0; y0 < ny; ++y0)
      for (int x0 = 0; x0 < nx; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int j = 0; j < kSsimWindow; ++j)
          for (int i = 0; i < kSsimWindow; ++i) {
            const double w = k[i] * k[j];
            const double va = a(x0 + i, y0 + j, c), vb = b(x0 + i, y0 + j, c);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
  return total / (static_cast<double>(nx) * ny * a.channels);
}

/// 10 log10(1 / MSE) for images in [0, 1]; identical images give 100 dB.
inline double psnr(const ImageD& a, const ImageD& b) {
  require(a.same_shape(b), "psnr: shape mismatch");
  require(!a.data.empty(), "psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

/// Maps a single-channel image in [0, 1] to RGB through the viridis table.
inline ImageD apply_colormap(const ImageD& scalar) {
  require(scalar.channels == 1, "apply_colormap: expected a single-channel image");
  ImageD out(scalar.width, scalar.height, 3);
  for (std::size_t i = 0; i < scalar.data.size(); ++i) {
    const double v = std::clamp(scalar.data[i], 0.0, 1.0);
    const auto& rgb = detail::kViridis[static_cast<std::size_t>(std::lround(v * 255.0))];
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = rgb[c];
  }
  return out;
}

/// Binary {0, 1} mask of pixels carrying `label`.
inline ImageD class_mask(const LabelMap& labels, int label) {
  ImageD m(labels.width, labels.height, 1);
  for (std::size_t i = 0; i < labels.data.size(); ++i) m.data[i] = labels.data[i] == label;
  return m;
}

struct MaskScore {
  double ssim = 0.0;
  double psnr = 0.0;
};

/// Colormaps both masks and compares the resulting RGB images.
inline MaskScore score_mask(const ImageD& relevancy, const ImageD& gt_mask) {
  const ImageD a = apply_colormap(relevancy), b = apply_colormap(gt_mask);
  return {ssim(a, b), psnr(a, b)};
}

struct LocalizationRow {
  int pose_id = 0;
  int label = 0;
  double ssim = 0.0;
  double psnr = 0.0;
  bool degenerate = false;
};

/// One row per (pose, class) for every class present in the scene.
inline std::vector<LocalizationRow> evaluate_localization(const SemanticFieldParams& field,
                                                          const Scene& scene,
                                                          const CameraIntrinsics& k,
                                                          std::span<const PoseSE3> poses,
                                                          std::uint64_t query_seed) {
  require(!poses.empty(), "evaluate_localization: at least one pose is required");
  const int classes = scene.class_count();
  std::vector<LocalizationRow> rows;
  for (std::size_t p = 0; p < poses.size(); ++p) {
    const RenderOutput r = render_full(scene, k, poses[p]);
    const SemanticImages sem = render_semantic_image(field, r.image, k, poses[p]);
    for (int c = 0; c < classes; ++c) {
      const QuerySet q = class_query(c, field.config.language_dim, query_seed);
      const RelevancyMask m = relevancy_mask(sem.language, q);
      const MaskScore s = score_mask(m.values, class_mask(r.labels, c));
      rows.push_back({static_cast<int>(p), c, s.ssim, s.psnr, m.degenerate});
    }
  }
  return rows;
}

}  // namespace spine
