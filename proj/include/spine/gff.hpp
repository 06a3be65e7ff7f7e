// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Sobel-Feldman edges and the geometric fidelity factor: the ratio of
// thresholded edge pixels in a semantic (PCA) image to those in the RGB
// image of the same view, counted over every (row, column, channel).

#pragma once

#include "spine/common.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace spine {

/// Normalizer mapping the Sobel response sqrt(Gx^2 + Gy^2) into [0, 1].
inline const double kSobelNorm = 4.0 * std::sqrt(2.0);

struct SobelGradients {
  ImageD gx;
  ImageD gy;
  ImageD magnitude;  // sqrt(gx^2 + gy^2) / (4 sqrt 2)
};

/// Per-channel 3x3 Sobel responses with replicate padding. Gx grows to the
/// right, Gy grows downward.
inline SobelGradients sobel(const ImageD& img) {
  const int w = img.width, h = img.height, ch = img.channels;
  SobelGradients g{ImageD(w, h, ch), ImageD(w, h, ch), ImageD(w, h, ch)};
  for (int y = 0; y < h; ++y) {
    const int ym = clamp_index(y - 1, h), yp = clamp_index(y + 1, h);
    for (int x = 0; x < w; ++x) {
      const int xm = clamp_index(x - 1, w), xp = clamp_index(x + 1, w);
      for (int c = 0; c < ch; ++c) {
        const double gx = (img(xp, ym, c) + 2.0 * img(xp, y, c) + img(xp, yp, c)) -
                          (img(xm, ym, c) + 2.0 * img(xm, y, c) + img(xm, yp, c));
        const double gy = (img(xm, yp, c) + 2.0 * img(x, yp, c) + img(xp, yp, c)) -
                          (img(xm, ym, c) + 2.0 * img(x, ym, c) + img(xp, ym, c));
        g.gx(x, y, c) = gx;
        g.gy(x, y, c) = gy;
        g.magnitude(x, y, c) = std::sqrt(gx * gx + gy * gy) / kSobelNorm;
      }
    }
  }
  return g;
}

/// Gradient magnitude of an image whose channels already lie in [0, 1].
inline ImageD sobel_magnitude(const ImageD& img) { return sobel(img).magnitude; }

struct EdgeMask {
  Image<std::uint8_t> mask;  // H x W x C, entries in {0, 1}
  double threshold = 0.0;

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : mask.data) n += v;
    return n;
  }
};

inline EdgeMask edge_mask(const ImageD& grad, double threshold) {
  require(threshold >= 0.0 && threshold <= 1.0, "edge_mask: threshold must lie in [0,1]");
  EdgeMask e{Image<std::uint8_t>(grad.width, grad.height, grad.channels), threshold};
  for (std::size_t i = 0; i < grad.data.size(); ++i) e.mask.data[i] = grad.data[i] > threshold;
  return e;
}

struct GffResult {
  double threshold = 0.0;
  std::size_t edges_sem = 0;
  std::size_t edges_rgb = 0;
  /// NaN when the RGB image has no edges at this threshold.
  double gff = std::numeric_limits<double>::quiet_NaN();
  bool defined() const { return edges_rgb > 0; }
};

namespace detail {

inline void check_gff_inputs(const ImageD& sem, const ImageD& rgb) {
  require(sem.width == rgb.width && sem.height == rgb.height,
          "gff: semantic and RGB images differ in size");
}

inline GffResult gff_from_gradients(const ImageD& gsem, const ImageD& grgb, double threshold) {
  GffResult r;
  r.threshold = threshold;
  r.edges_sem = edge_mask(gsem, threshold).count();
  r.edges_rgb = edge_mask(grgb, threshold).count();
  if (r.edges_rgb > 0)
    r.gff = static_cast<double>(r.edges_sem) / static_cast<double>(r.edges_rgb);
  return r;
}

}  // namespace detail

/// Both images are min-max normalized per channel before edge extraction.
/// A zero RGB edge count yields gff = NaN with defined() == false.
inline GffResult gff(const ImageD& sem_img, const ImageD& rgb_img, double threshold) {
  detail::check_gff_inputs(sem_img, rgb_img);
  return detail::gff_from_gradients(sobel_magnitude(normalize_channels(sem_img)),
                                    sobel_magnitude(normalize_channels(rgb_img)), threshold);
}

inline const std::vector<double>& default_gff_thresholds() {
  static const std::vector<double> t{0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5};
  return t;
}

inline std::vector<GffResult> gff_curve(const ImageD& sem_img, const ImageD& rgb_img,
                                        const std::vector<double>& thresholds) {
  detail::check_gff_inputs(sem_img, rgb_img);
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    require(thresholds[i] >= thresholds[i - 1], "gff_curve: thresholds must be sorted ascending");
  const ImageD gsem = sobel_magnitude(normalize_channels(sem_img));
  const ImageD grgb = sobel_magnitude(normalize_channels(rgb_img));
  std::vector<GffResult> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) out.push_back(detail::gff_from_gradients(gsem, grgb, t));
  return out;
}

}  // namespace spine
