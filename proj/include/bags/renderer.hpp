#pragma once

#include "bags/camera.hpp"
#include "bags/gaussian_cloud.hpp"
#include "bags/geometry.hpp"
#include "bags/image.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

namespace bags {

/// Rasterization knobs. exact() disables every approximation so the tiled renderer can be
/// compared against render_reference.
struct RasterConfig {
    double alpha_min = 1.0 / 255.0;  // contributions below this are skipped
    double transmittance_min = 1e-4; // a pixel stops once transmittance would drop below this
    double alpha_max = 0.99;
    double cutoff_sigma = 3.0; // half-extent of the tile-assignment box, in standard deviations
    double near_plane = 0.01;
    double lowpass = 0.3; // isotropic 2D covariance floor, pixels^2
    int tile_size = 16;

    static RasterConfig exact();
};

/// World-space splats with activated opacity. Produced from a canonical cloud or a warp.
struct SplatSet {
    std::vector<Vec3> means;
    std::vector<Mat3> covariances;
    std::vector<double> opacities;
    std::vector<Vec3> colors;

    std::size_t size() const noexcept { return means.size(); }
    void resize(std::size_t n);
    static SplatSet from_cloud(const GaussianCloud& cloud);
};

struct ProjectedSplat {
    Vec2 mean;  // pixels
    Mat2 cov;   // includes the low-pass floor
    Vec3 conic; // (a, b, c) of the inverse covariance [[a, b], [b, c]]
    double depth = 0.0;
    double opacity = 0.0;
    Vec3 color = Vec3::Zero();
    std::uint32_t index = 0; // source splat
    Vec3 camera_mean;        // camera-space center
    Mat3 camera_cov;         // W Sigma W^T
    int tile_min[2] = {0, 0};
    int tile_max[2] = {-1, -1}; // inclusive; empty when max < min
};

/// Pinhole projection with the EWA affine Jacobian. Returns nullopt when the splat is
/// behind the near plane, degenerate, or its cutoff box misses the image.
std::optional<ProjectedSplat> project(const Vec3& mean, const Mat3& covariance, double opacity,
                                      const Vec3& color, const Camera& camera,
                                      const RasterConfig& config);

/// Everything render_backward needs from the forward pass.
struct RasterState {
    Camera camera;
    RasterConfig config;
    Vec3 background = Vec3::Zero();
    std::size_t source_count = 0;
    std::vector<ProjectedSplat> splats; // depth order, ties broken by source index
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<std::uint32_t> tile_offsets; // tiles + 1
    std::vector<std::uint32_t> tile_entries; // indices into splats
    bool tiled = true;
};

struct RenderOutput {
    Image color; // H x W x 3, background composited
    Image alpha; // H x W x 1, 1 - final transmittance
    std::shared_ptr<const RasterState> state;
};

RenderOutput render_forward(const SplatSet& splats, const Camera& camera, const Vec3& background,
                            const RasterConfig& config = {});

/// Untiled oracle: every pixel blends every projected splat in global depth order and never
/// terminates early.
RenderOutput render_reference(const SplatSet& splats, const Camera& camera,
                              const Vec3& background, const RasterConfig& config = {});

/// Gradients with respect to the SplatSet inputs.
struct SplatGrads {
    std::vector<Vec3> means;
    std::vector<Mat3> covariances;
    std::vector<double> opacities;
    std::vector<Vec3> colors;
    std::vector<double> view_grad_norm; // |dL/d mean2d| in NDC units
    std::vector<std::uint8_t> visible;

    void resize(std::size_t n);
    std::size_t size() const noexcept { return means.size(); }
};

/// Adjoint of render_forward (or render_reference). Either gradient image may be null.
/// Throws StateError when `forward` carries no retained state.
SplatGrads render_backward(const RenderOutput& forward, const Image* grad_color,
                           const Image* grad_alpha);

/// Per-Gaussian gradients for the canonical cloud parameters.
struct RenderGrads {
    std::vector<Vec3> position;
    std::vector<Vec4> rotation;
    std::vector<Vec3> log_scale;
    std::vector<double> opacity_logit;
    std::vector<Vec3> color;
    std::vector<double> view_grad_norm;
};

/// Chains splat gradients of `SplatSet::from_cloud(cloud)` to the stored parameters.
RenderGrads cloud_grads(const GaussianCloud& cloud, const SplatGrads& grads);

/// Adds RenderGrads into the cloud's gradient buffers.
void accumulate_into(GaussianCloud& cloud, const RenderGrads& grads);

} // namespace bags
