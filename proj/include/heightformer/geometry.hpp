#pragma once

// Height-based frustum geometry.
//
// Frames:
//   camera  : x right, y down, z forward (optical axis)
//   virtual : camera-centered, rotated so +y is exactly perpendicular to the
//             ground and points down; the ground is the plane y = H
//   ego     : road-aligned, x forward, y left, z up, ground at z = 0
//
// A pixel (u, v) carrying a height h above ground is lifted by
//   cam ref point  = K^-1 (u, v, 1)
//   virtual ref    = R_cam->virt * cam ref
//   virtual point  = (H - h) / y_ref * virtual ref      (similar triangles)
//   ego point      = T_virt->ego * virtual point

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <string>

#include "heightformer/errors.hpp"

namespace hf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kRotationTolerance = 1e-9;
inline constexpr double kHorizonEps = 1e-9;

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw ContractError("intrinsics need fx > 0 and fy > 0");
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }
};

inline bool is_rotation(const Mat3& r, double tol = kRotationTolerance) {
  return (r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform make(const Mat3& rotation, const Vec3& translation) {
    if (!is_rotation(rotation)) throw ContractError("rotation is not orthonormal with det +1");
    return {rotation, translation};
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_direction(const Vec3& d) const { return rotation * d; }

  RigidTransform inverse() const {
    const Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  /// (this ∘ first): apply `first`, then this.
  RigidTransform after(const RigidTransform& first) const {
    return {rotation * first.rotation, rotation * first.translation + translation};
  }
};

/// ax + by + cz + d = 0 in the camera frame, (a, b, c) unit length.
struct GroundPlane {
  double a = 0.0, b = -1.0, c = 0.0, d = 1.0;

  Vec3 normal() const { return {a, b, c}; }

  void validate() const {
    if (std::abs(normal().norm() - 1.0) > 1e-9) throw ContractError("ground plane normal is not unit length");
    if (d == 0.0) throw ContractError("camera lies on the ground plane (d == 0)");
  }

  /// Unit normal pointing from the camera toward the ground, whichever way
  /// (a, b, c) was written.
  Vec3 downward_normal() const { return d > 0.0 ? Vec3(-normal()) : normal(); }

  /// Camera-to-plane distance.
  double distance() const { return std::abs(d); }
};

struct VirtualCameraFrame {
  CameraIntrinsics intrinsics;
  RigidTransform cam_to_virtual;
  RigidTransform virtual_to_ego;
  double camera_height = 1.0;
};

struct PixelHeightSample {
  double u = 0.0, v = 0.0, h = 0.0;
};

/// Point on the depth-1 reference plane with its carried height.
struct CamRefPoint {
  Vec3 point;
  double h = 0.0;
};

inline CamRefPoint pixel_to_cam_ref(const PixelHeightSample& s, const CameraIntrinsics& k) {
  k.validate();
  return {Vec3((s.u - k.cx) / k.fx, (s.v - k.cy) / k.fy, 1.0), s.h};
}

/// Smallest rotation taking unit vector `from` onto unit vector `to`.
/// Antiparallel inputs rotate 180 degrees about the camera x-axis.
inline Mat3 minimal_rotation(const Vec3& from, const Vec3& to) {
  const Vec3 axis = from.cross(to);
  const double cosine = from.dot(to);
  if (axis.norm() < 1e-15) {
    if (cosine > 0.0) return Mat3::Identity();
    return Eigen::AngleAxisd(M_PI, Vec3::UnitX()).toRotationMatrix();
  }
  Mat3 skew;
  skew << 0.0, -axis.z(), axis.y(), axis.z(), 0.0, -axis.x(), -axis.y(), axis.x(), 0.0;
  return Mat3::Identity() + skew + skew * skew * (1.0 / (1.0 + cosine));
}

/// ego = (z_v, -x_v, H - y_v).
inline RigidTransform canonical_virtual_to_ego(double camera_height) {
  Mat3 r;
  r << 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0;
  return {r, Vec3(0.0, 0.0, camera_height)};
}

/// Virtual frame from a ground plane. virtual_to_ego is left as identity.
inline VirtualCameraFrame virtual_from_ground_plane(const GroundPlane& plane, const CameraIntrinsics& k) {
  plane.validate();
  k.validate();
  VirtualCameraFrame f;
  f.intrinsics = k;
  f.cam_to_virtual = {minimal_rotation(plane.downward_normal(), Vec3::UnitY()), Vec3::Zero()};
  f.camera_height = plane.distance();
  return f;
}

/// Full frame: virtual frame plus the canonical road-aligned ego transform.
inline VirtualCameraFrame make_camera_frame(const GroundPlane& plane, const CameraIntrinsics& k) {
  auto f = virtual_from_ground_plane(plane, k);
  f.virtual_to_ego = canonical_virtual_to_ego(f.camera_height);
  return f;
}

/// Plane seen by a camera pitched down by `pitch` (radians) and rolled by
/// `roll` about its optical axis, mounted `height` meters above the ground.
/// Written with the normal pointing up toward the camera and d > 0.
inline GroundPlane ground_plane_for(double pitch, double height, double roll = 0.0) {
  const Mat3 cam_to_virtual =
      (Eigen::AngleAxisd(-pitch, Vec3::UnitX()) * Eigen::AngleAxisd(roll, Vec3::UnitZ())).toRotationMatrix();
  const Vec3 down = cam_to_virtual.transpose() * Vec3::UnitY();
  return {-down.x(), -down.y(), -down.z(), height};
}

inline Vec3 cam_to_virtual(const Vec3& p_cam, const VirtualCameraFrame& f) {
  return f.cam_to_virtual.apply(p_cam);
}

/// Scales the virtual reference point so it sits h meters above the ground.
inline Vec3 ground_intersect(const Vec3& p_ref_virt, double h, const VirtualCameraFrame& f) {
  if (!(p_ref_virt.y() > kHorizonEps)) throw HorizonError("ray does not descend toward the ground");
  if (h >= f.camera_height) {
    throw HeightExceedsCameraError("height " + std::to_string(h) + " m is not below the camera (" +
                                   std::to_string(f.camera_height) + " m)");
  }
  Vec3 p = ((f.camera_height - h) / p_ref_virt.y()) * p_ref_virt;
  p.y() = f.camera_height - h;
  return p;
}

inline Vec3 virtual_to_ego(const Vec3& p_virt, const VirtualCameraFrame& f) {
  return f.virtual_to_ego.apply(p_virt);
}

inline Vec3 lift_pixel(const PixelHeightSample& s, const VirtualCameraFrame& f) {
  const auto ref = pixel_to_cam_ref(s, f.intrinsics);
  return virtual_to_ego(ground_intersect(cam_to_virtual(ref.point, f), ref.h, f), f);
}

inline Vec3 ego_to_camera(const Vec3& p_ego, const VirtualCameraFrame& f) {
  return f.cam_to_virtual.inverse().apply(f.virtual_to_ego.inverse().apply(p_ego));
}

inline Vec3 camera_to_ego(const Vec3& p_cam, const VirtualCameraFrame& f) {
  return f.virtual_to_ego.apply(f.cam_to_virtual.apply(p_cam));
}

/// Perspective projection of an ego point; h is its ego z.
inline PixelHeightSample project_ego_to_pixel(const Vec3& p_ego, const VirtualCameraFrame& f) {
  const Vec3 p = ego_to_camera(p_ego, f);
  if (!(p.z() > 0.0)) throw BehindCameraError("point is behind the camera");
  const auto& k = f.intrinsics;
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy, p_ego.z()};
}

}  // namespace hf
