// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Shared building blocks: error types, the seeded random source and the
// dense H x W x C image container used by every other module.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace spine {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument was violated (maps to CLI exit code 2).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed input document. `context` names the offending field or line.
class ParseError : public InvalidArgument {
 public:
  ParseError(const std::string& context, const std::string& what)
      : InvalidArgument(context.empty() ? what : context + ": " + what),
        context_(context) {}
  const std::string& context() const noexcept { return context_; }

 private:
  std::string context_;
};

class BehindCamera : public Error {
 public:
  using Error::Error;
};

class TrainingFailure : public Error {
 public:
  TrainingFailure(const std::string& what, std::vector<double> trace)
      : Error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

class InsufficientMatches : public Error {
 public:
  using Error::Error;
};

class RansacFailure : public Error {
 public:
  using Error::Error;
};

class DegenerateConfiguration : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// Seeded generator with platform-independent output. The std distributions
/// are implementation-defined, so uniform and normal draws are derived here
/// directly from the (standardized) mt19937_64 bit stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniformly distributed unit vector on S^2.
  Vec3 unit_vector() {
    Vec3 v;
    do {
      v = Vec3(normal(), normal(), normal());
    } while (v.norm() < 1e-12);
    return v.normalized();
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent stream seed from a master seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  std::mt19937_64 e(seq);
  return e();
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Row-major H x W x C array. Pixel (x, y) channel c lives at
/// ((y * width) + x) * channels + c.
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c, T fill = T{})
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {
    require(w >= 0 && h >= 0 && c >= 0, "image dimensions must be non-negative");
  }

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::size_t offset(int x, int y) const {
    return (static_cast<std::size_t>(y) * width + x) * channels;
  }
  T& operator()(int x, int y, int c = 0) { return data[offset(x, y) + c]; }
  const T& operator()(int x, int y, int c = 0) const { return data[offset(x, y) + c]; }
  T* pixel(int x, int y) { return data.data() + offset(x, y); }
  const T* pixel(int x, int y) const { return data.data() + offset(x, y); }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  bool same_size(int w, int h) const { return width == w && height == h; }
  bool operator==(const Image&) const = default;
};

using ImageD = Image<double>;
using LabelMap = Image<int>;

inline constexpr int kBackgroundLabel = -1;

/// Per-channel min-max normalization to [0, 1]; constant channels map to 0.
inline ImageD normalize_channels(const ImageD& img) {
  ImageD out = img;
  for (int c = 0; c < img.channels; ++c) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
      const double v = img.data[i * img.channels + c];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double span = hi - lo;
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
      double& v = out.data[i * img.channels + c];
      v = span > 0.0 ? (v - lo) / span : 0.0;
    }
  }
  return out;
}

/// Selects a subset of channels into a new image.
inline ImageD select_channels(const ImageD& img, int first, int count) {
  require(first >= 0 && first + count <= img.channels, "channel range out of bounds");
  ImageD out(img.width, img.height, count);
  for (std::size_t i = 0; i < img.pixel_count(); ++i)
    for (int c = 0; c < count; ++c)
      out.data[i * count + c] = img.data[i * img.channels + first + c];
  return out;
}

inline int clamp_index(int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); }

/// Separable Gaussian blur with a (2*radius+1)-tap normalized kernel and
/// replicate padding.
inline ImageD gaussian_blur(const ImageD& img, double sigma, int radius) {
  if (radius <= 0 || sigma <= 0.0) return img;
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;

  const int w = img.width, h = img.height, ch = img.channels;
  ImageD tmp(w, h, ch), out(w, h, ch);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * img(clamp_index(x + i, w), y, c);
        tmp(x, y, c) = acc;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * tmp(x, clamp_index(y + i, h), c);
        out(x, y, c) = acc;
      }
  return out;
}

}  // namespace spine
