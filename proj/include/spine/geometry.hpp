// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// SO(3)/SE(3) value types, the so(3) exponential and logarithm, pinhole
// projection and the pose-error metrics used throughout evaluation.
//
// Pose convention: PoseSE3 stores the camera-to-world transform. `rotation`
// maps camera axes into the world frame and `translation` is the camera
// centre in world coordinates. The camera frame is OpenCV-style: +z forward,
// +x right, +y down. Projection therefore applies the inverse transform.

#pragma once

#include "spine/common.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace spine {

inline constexpr double kPi = std::numbers::pi;
inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<     0, -v.z(),  v.y(),
       v.z(),      0, -v.x(),
      -v.y(),  v.x(),      0;
  // clang-format on
  return s;
}

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

/// Element of SO(3). Construction validates orthonormality and det = +1.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  /// Validating constructor; `tol` bounds ||M^T M - I|| and |det M - 1|.
  explicit Rotation(const Mat3& m, double tol = 1e-6) : m_(m) {
    if (!m.allFinite()) throw InvalidArgument("rotation matrix has non-finite entries");
    const double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
    const double det = m.determinant();
    if (ortho > tol || std::abs(det - 1.0) > tol)
      throw InvalidArgument("matrix is not a proper rotation (orthonormality error " +
                            std::to_string(ortho) + ", det " + std::to_string(det) + ")");
  }

  static Rotation identity() { return Rotation(); }

  const Mat3& matrix() const { return m_; }
  Rotation inverse() const { return unchecked(m_.transpose()); }
  Rotation operator*(const Rotation& o) const { return unchecked(m_ * o.m_); }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }
  bool operator==(const Rotation& o) const { return m_ == o.m_; }

  /// Re-orthonormalizes via SVD; used after long chains of products.
  Rotation normalized() const {
    Eigen::JacobiSVD<Mat3> svd(m_, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
      Mat3 u = svd.matrixU();
      u.col(2) *= -1.0;
      r = u * svd.matrixV().transpose();
    }
    return unchecked(r);
  }

  /// Skips validation; callers guarantee the matrix is a rotation.
  static Rotation unchecked(const Mat3& m) {
    Rotation r;
    r.m_ = m;
    return r;
  }

 private:
  Mat3 m_;
};

/// Axis-angle vector r = theta * axis.
struct AxisAngle {
  Vec3 r = Vec3::Zero();
  double angle() const { return r.norm(); }
};

struct PoseSE3 {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  static PoseSE3 identity() { return {}; }

  /// World-to-camera rotation and translation: x_cam = R_wc x + t_wc.
  Mat3 world_to_camera_rotation() const { return rotation.matrix().transpose(); }
  Vec3 world_to_camera_translation() const {
    return -(rotation.matrix().transpose() * translation);
  }
  Vec3 to_camera(const Vec3& x) const {
    return rotation.matrix().transpose() * (x - translation);
  }
  Vec3 to_world(const Vec3& x_cam) const { return rotation.matrix() * x_cam + translation; }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation.matrix();
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  /// Builds a camera-to-world pose from the world-to-camera pair (R, t).
  static PoseSE3 from_world_to_camera(const Mat3& r_wc, const Vec3& t_wc) {
    PoseSE3 p;
    p.rotation = Rotation::unchecked(r_wc.transpose());
    p.translation = -(r_wc.transpose() * t_wc);
    return p;
  }

  bool operator==(const PoseSE3& o) const {
    return rotation == o.rotation && translation == o.translation;
  }
};

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const {
    require(std::isfinite(fx) && std::isfinite(fy) && fx > 0.0 && fy > 0.0,
            "intrinsics: focal lengths must be positive");
    require(width > 0 && height > 0, "intrinsics: image size must be positive");
    require(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height,
            "intrinsics: principal point must lie inside the image");
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }

  /// Square image with the given horizontal field of view (degrees).
  static CameraIntrinsics from_fov(int width, int height, double fov_deg) {
    CameraIntrinsics k;
    k.width = width;
    k.height = height;
    k.fx = k.fy = 0.5 * width / std::tan(0.5 * deg2rad(fov_deg));
    k.cx = 0.5 * (width - 1);
    k.cy = 0.5 * (height - 1);
    return k;
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

// ---------------------------------------------------------------------------
// Exponential and logarithm
// ---------------------------------------------------------------------------

inline Rotation exp_so3(const AxisAngle& aa) {
  const Vec3& r = aa.r;
  if (!r.allFinite()) throw InvalidArgument("exp_so3: non-finite axis-angle");
  const double theta = r.norm();
  const Mat3 k = skew(r);
  if (theta < 1e-8) return Rotation::unchecked(Mat3::Identity() + k);
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Rotation::unchecked(Mat3::Identity() + a * k + b * k * k);
}

inline Rotation exp_so3(const Vec3& r) { return exp_so3(AxisAngle{r}); }

/// Canonical logarithm: ||r|| in [0, pi]. At theta = pi the axis sign is
/// fixed by pivoting on the largest diagonal entry of (R + I) / 2 and
/// making that axis component positive.
inline AxisAngle log_so3(const Rotation& rot) {
  const Mat3& m = rot.matrix();
  const double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!m.allFinite() || ortho > 1e-6 || std::abs(m.determinant() - 1.0) > 1e-6)
    throw InvalidArgument("log_so3: input is not a rotation");

  const Vec3 w(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  const double s = 0.5 * w.norm();
  const double c = std::clamp(0.5 * (m.trace() - 1.0), -1.0, 1.0);
  const double theta = std::atan2(s, c);

  if (theta < 1e-8) return {0.5 * w};
  if (kPi - theta > 1e-3) return {theta / (2.0 * std::sin(theta)) * w};

  // Near pi: the symmetric part is cos(theta) I + (1 - cos(theta)) a a^T.
  const Mat3 aat = (0.5 * (m + m.transpose()) - c * Mat3::Identity()) / (1.0 - c);
  int k = 0;
  aat.diagonal().maxCoeff(&k);
  Vec3 axis = aat.col(k) / std::sqrt(std::max(aat(k, k), 1e-300));
  axis.normalize();
  // The antisymmetric part carries sin(theta) a; once it vanishes into
  // rounding noise the sign is fixed by the pivot component instead.
  if (kPi - theta > 1e-12) {
    if (axis.dot(w) < 0.0) axis = -axis;
  } else if (axis(k) < 0.0) {
    axis = -axis;
  }
  return {theta * axis};
}

/// Represents the same rotation as `r` on the other side of the double
/// cover (angle theta - 2 pi about the same axis).
inline Vec3 antipodal_axis_angle(const Vec3& r) {
  const double theta = r.norm();
  if (theta < 1e-12) return r;
  return r * (1.0 - 2.0 * kPi / theta);
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Geodesic angle between two rotations, in degrees, [0, 180]. Equal to
/// arccos((tr(R_est^T R_gt) - 1) / 2); evaluated with atan2 of the sine and
/// cosine parts so small angles keep full precision and the result is never
/// NaN.
inline double rotation_error_deg(const Rotation& est, const Rotation& gt) {
  const Mat3 d = est.matrix().transpose() * gt.matrix();
  const double c = std::clamp(0.5 * (d.trace() - 1.0), -1.0, 1.0);
  const Vec3 w(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
  const double s = 0.5 * w.norm();
  return rad2deg(std::atan2(s, c));
}

inline double translation_error(const Vec3& est, const Vec3& gt) { return (est - gt).norm(); }

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

struct Projection {
  Vec2 pixel;
  double depth;
};

inline Projection project(const CameraIntrinsics& k, const PoseSE3& pose, const Vec3& x) {
  const Vec3 c = pose.to_camera(x);
  if (!(c.z() > 1e-9)) throw BehindCamera("project: point is behind the camera");
  return {Vec2(k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy), c.z()};
}

/// Camera-frame ray direction (z = 1) through a pixel.
inline Vec3 pixel_ray(const CameraIntrinsics& k, const Vec2& pixel) {
  return Vec3((pixel.x() - k.cx) / k.fx, (pixel.y() - k.cy) / k.fy, 1.0);
}

/// Inverse of `project`: depth is the camera-frame z coordinate.
inline Vec3 backproject(const CameraIntrinsics& k, const PoseSE3& pose, const Vec2& pixel,
                        double depth) {
  if (!(depth > 0.0) || !std::isfinite(depth))
    throw InvalidArgument("backproject: depth must be positive");
  return pose.to_world(depth * pixel_ray(k, pixel));
}

// ---------------------------------------------------------------------------
// Pose construction helpers
// ---------------------------------------------------------------------------

/// Applies a rotation of exactly `r_err_deg` about a uniformly random axis
/// (pre-multiplied, i.e. about the camera centre in world axes) and a
/// translation offset of exactly `t_err` in a uniformly random direction.
inline PoseSE3 perturb_pose(const PoseSE3& pose, double r_err_deg, double t_err,
                            std::uint64_t seed) {
  require(r_err_deg >= 0.0 && r_err_deg <= 180.0, "perturb_pose: rotation error out of range");
  require(t_err >= 0.0, "perturb_pose: translation error must be non-negative");
  Rng rng(seed);
  const Vec3 axis = rng.unit_vector();
  const Vec3 dir = rng.unit_vector();
  PoseSE3 out;
  out.rotation = exp_so3(Vec3(deg2rad(r_err_deg) * axis)) * pose.rotation;
  out.translation = pose.translation + t_err * dir;
  return out;
}

/// Camera at `eye` looking at `target`. `up` is the world up direction; the
/// camera +y axis points away from it (image rows grow downward).
inline PoseSE3 look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) x = z.cross(Vec3::UnitX());
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  PoseSE3 p;
  p.rotation = Rotation::unchecked(r);
  p.translation = eye;
  return p;
}

/// Camera on a sphere around `target` at the given azimuth / elevation
/// (degrees) and radius.
inline PoseSE3 orbit_pose(double azimuth_deg, double elevation_deg, double radius,
                          const Vec3& target = Vec3::Zero()) {
  const double az = deg2rad(azimuth_deg), el = deg2rad(elevation_deg);
  const Vec3 eye = target + radius * Vec3(std::cos(el) * std::cos(az),
                                          std::cos(el) * std::sin(az), std::sin(el));
  return look_at(eye, target);
}

}  // namespace spine
