#pragma once

#include "bags/geometry.hpp"

namespace bags {

struct Intrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 0;
    int height = 0;
};

/// Pinhole camera. Camera space is x right, y down, z forward; pixel (i, j) is
/// sampled at its center (i + 0.5, j + 0.5).
struct Camera {
    Intrinsics intrinsics;
    RigidTransform world_to_camera;

    /// Throws ConfigError unless fx, fy > 0, the image is non-empty and the
    /// rotation is orthonormal within 1e-8.
    void validate() const;

    Vec3 position() const;
    Vec3 forward() const;
    Vec3 up() const;
    double vertical_fov_deg() const;

    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& world_up,
                          const Intrinsics& intrinsics);
};

/// Intrinsics for a square-pixel camera with the principal point at the image center.
Intrinsics intrinsics_from_fov(int width, int height, double vertical_fov_deg);

} // namespace bags
