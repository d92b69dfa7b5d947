#include "bags/geometry.hpp"

#include <Eigen/Geometry>

#include <cmath>

namespace bags {

namespace {

Mat3 unit_quat_to_rotation(double w, double x, double y, double z) {
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y), //
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),  //
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

} // namespace

Mat3 quat_to_rotation(const Vec4& q) {
    const Vec4 n = q / q.norm();
    return unit_quat_to_rotation(n[0], n[1], n[2], n[3]);
}

Vec4 quat_to_rotation_backward(const Vec4& q, const Mat3& g) {
    const double len = q.norm();
    const Vec4 n = q / len;
    const double w = n[0];
    const double x = n[1];
    const double y = n[2];
    const double z = n[3];
    Vec4 dn;
    dn[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    dn[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) +
                 z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2));
    dn[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
                 w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2));
    dn[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) +
                 y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
    // d(q/|q|)/dq = (I - n n^T) / |q|
    return (dn - n * n.dot(dn)) / len;
}

Vec4 quat_from_rotation(const Mat3& r) {
    const Eigen::Quaterniond q(r);
    Vec4 out(q.w(), q.x(), q.y(), q.z());
    if (out[0] < 0.0) {
        out = -out;
    }
    return out / out.norm();
}

Vec4 quat_from_axis_angle(const Vec3& axis, double angle_rad) {
    const Vec3 a = axis.normalized();
    const double s = std::sin(0.5 * angle_rad);
    return {std::cos(0.5 * angle_rad), a.x() * s, a.y() * s, a.z() * s};
}

Vec4 quat_normalized(const Vec4& q) { return q / q.norm(); }

Vec4 quat_slerp(const Vec4& a, const Vec4& b, double t) {
    const Eigen::Quaterniond qa(a[0], a[1], a[2], a[3]);
    const Eigen::Quaterniond qb(b[0], b[1], b[2], b[3]);
    const Eigen::Quaterniond q = qa.normalized().slerp(t, qb.normalized());
    return {q.w(), q.x(), q.y(), q.z()};
}

RigidTransform RigidTransform::inverse() const {
    RigidTransform out;
    out.rotation = rotation.transpose();
    out.translation = -(out.rotation * translation);
    return out;
}

RigidTransform compose(const RigidTransform& outer, const RigidTransform& inner) {
    return {outer.rotation * inner.rotation, outer.rotation * inner.translation + outer.translation};
}

} // namespace bags
