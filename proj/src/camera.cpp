#include "bags/camera.hpp"

#include "bags/error.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <numbers>

namespace bags {

void Camera::validate() const {
    if (!(intrinsics.fx > 0.0) || !(intrinsics.fy > 0.0)) {
        throw ConfigError("camera focal lengths must be positive");
    }
    if (intrinsics.width <= 0 || intrinsics.height <= 0) {
        throw ConfigError("camera image size must be positive");
    }
    const Mat3& r = world_to_camera.rotation;
    const double err = (r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(err <= 1e-8) || r.determinant() < 0.0) {
        throw ConfigError("camera rotation is not a proper rotation");
    }
}

Vec3 Camera::position() const {
    return -(world_to_camera.rotation.transpose() * world_to_camera.translation);
}

Vec3 Camera::forward() const { return world_to_camera.rotation.row(2).transpose(); }

Vec3 Camera::up() const { return -world_to_camera.rotation.row(1).transpose(); }

double Camera::vertical_fov_deg() const {
    return 2.0 * std::atan(0.5 * intrinsics.height / intrinsics.fy) * 180.0 / std::numbers::pi;
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& world_up,
                       const Intrinsics& intrinsics) {
    const Vec3 f = (target - eye).normalized();
    Vec3 r = f.cross(world_up);
    if (r.norm() < 1e-12) {
        // Looking straight along the up axis; any perpendicular works.
        r = f.cross(std::abs(f.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY());
    }
    r.normalize();
    const Vec3 down = f.cross(r);
    Camera cam;
    cam.intrinsics = intrinsics;
    cam.world_to_camera.rotation.row(0) = r.transpose();
    cam.world_to_camera.rotation.row(1) = down.transpose();
    cam.world_to_camera.rotation.row(2) = f.transpose();
    cam.world_to_camera.translation = -(cam.world_to_camera.rotation * eye);
    return cam;
}

Intrinsics intrinsics_from_fov(int width, int height, double vertical_fov_deg) {
    const double f =
        0.5 * height / std::tan(0.5 * vertical_fov_deg * std::numbers::pi / 180.0);
    return {f, f, 0.5 * width, 0.5 * height, width, height};
}

} // namespace bags
