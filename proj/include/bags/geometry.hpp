#pragma once

#include <Eigen/Core>

namespace bags {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d; // quaternions are (w, x, y, z)
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// Rotation matrix of q / |q|.
Mat3 quat_to_rotation(const Vec4& q);

/// Gradient with respect to the unnormalized quaternion given dL/dR.
Vec4 quat_to_rotation_backward(const Vec4& q, const Mat3& grad_rotation);

Vec4 quat_from_rotation(const Mat3& r);
Vec4 quat_from_axis_angle(const Vec3& axis, double angle_rad);
Vec4 quat_normalized(const Vec4& q);
/// Shortest-arc spherical interpolation between unit quaternions.
Vec4 quat_slerp(const Vec4& a, const Vec4& b, double t);

/// x -> rotation * x + translation.
struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
    RigidTransform inverse() const;
    static RigidTransform identity() { return {}; }
};

RigidTransform compose(const RigidTransform& outer, const RigidTransform& inner);

} // namespace bags
