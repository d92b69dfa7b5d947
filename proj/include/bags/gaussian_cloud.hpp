#pragma once

#include "bags/camera.hpp"
#include "bags/dense_array.hpp"
#include "bags/geometry.hpp"
#include "bags/image.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace bags {

double sigmoid(double x);
double logit(double p);

/// One splat in canonical space. Scale and opacity are stored unconstrained.
struct Gaussian {
    Vec3 position = Vec3::Zero();
    Vec4 rotation{1.0, 0.0, 0.0, 0.0};
    Vec3 log_scale = Vec3::Zero();
    double opacity_logit = 0.0;
    Vec3 color = Vec3::Zero();

    double opacity() const { return sigmoid(opacity_logit); }
    Vec3 scale() const { return log_scale.array().exp(); }
};

/// Sigma = R S S^T R^T with R from the (normalized) quaternion and S = diag(exp(log_scale)).
Mat3 build_covariance(const Vec4& rotation, const Vec3& log_scale);
inline Mat3 build_covariance(const Gaussian& g) { return build_covariance(g.rotation, g.log_scale); }

struct CovarianceGrad {
    Vec4 rotation = Vec4::Zero();
    Vec3 log_scale = Vec3::Zero();
};

/// Chain rule from dL/dSigma (taken as a symmetric matrix) to quaternion and log-scale.
CovarianceGrad build_covariance_backward(const Vec4& rotation, const Vec3& log_scale,
                                         const Mat3& grad_covariance);

/// Structure-of-arrays splat storage plus the densification statistics.
class GaussianCloud {
  public:
    GaussianCloud() = default;
    explicit GaussianCloud(std::size_t count);
    static GaussianCloud from_gaussians(const std::vector<Gaussian>& gaussians);

    std::size_t size() const noexcept { return positions.rows(); }
    Gaussian get(std::size_t i) const;
    void set(std::size_t i, const Gaussian& g);

    /// Parameter arrays in a fixed order: positions, rotations, log_scales, opacity_logits, colors.
    std::vector<DenseArray*> parameters();
    std::vector<const DenseArray*> parameters() const;
    void zero_grad();

    /// Renormalizes quaternions, clamps scales to (0, max_scale] and colors to [0, 1].
    void enforce_invariants(double max_scale);

    /// Adds one view's screen-space positional gradient norms (and the 3D position
    /// gradient, used to offset clones) to the densification statistics.
    void accumulate_densify_stats(std::span<const double> view_grad_norm,
                                  std::span<const Vec3> position_grad,
                                  std::span<const std::uint8_t> visible);
    void reset_densify_stats();
    /// Replaces the statistics wholesale; used when resuming from a checkpoint.
    void restore_densify_stats(std::vector<double> accum, std::vector<std::uint32_t> count,
                               std::vector<Vec3> position_accum);
    const std::vector<double>& view_grad_accum() const noexcept { return view_grad_accum_; }
    const std::vector<std::uint32_t>& view_grad_count() const noexcept { return view_grad_count_; }
    const std::vector<Vec3>& position_grad_accum() const noexcept { return position_grad_accum_; }

    Vec3 centroid() const;

    DenseArray positions;      // N x 3
    DenseArray rotations;      // N x 4
    DenseArray log_scales;     // N x 3
    DenseArray opacity_logits; // N x 1
    DenseArray colors;         // N x 3

  private:
    void resize_stats();

    std::vector<double> view_grad_accum_;
    std::vector<std::uint32_t> view_grad_count_;
    std::vector<Vec3> position_grad_accum_;
};

struct DensifyConfig {
    double grad_threshold = 2e-4;     // mean screen-space gradient norm (NDC units)
    double split_scale_fraction = 0.01; // split when max scale exceeds this * scene_extent
    double prune_opacity = 0.005;
    double split_shrink = 1.6;
    double scene_extent = 1.0;
};

struct DensifyReport {
    std::size_t cloned = 0;
    std::size_t split = 0;
    std::size_t pruned = 0;
    /// For every output row, the input row it inherits optimizer state from, or -1.
    std::vector<std::ptrdiff_t> source;
};

/// Clones small high-gradient splats, splits large ones into two shrunken children
/// sampled inside the parent, prunes low-opacity splats and resets the statistics.
/// Throws NumericError if nothing survives.
DensifyReport densify_and_prune(GaussianCloud& cloud, const DensifyConfig& config,
                                std::mt19937_64& rng);

struct MaskInitConfig {
    std::size_t count = 1000;
    double scene_extent = 1.0;
    Vec3 scene_center = Vec3::Zero();
    double depth_spread = 0.5; // depths uniform within +-spread * extent of the center depth
    double initial_opacity = 0.1;
    std::uint64_t seed = 0;
};

/// Back-projects random foreground pixels of a reference frame. Isotropic scales come
/// from the mean distance to the three nearest neighbors. Throws ConfigError on an empty mask.
GaussianCloud init_from_mask(const Image& image, const Image& mask, const Camera& camera,
                             const MaskInitConfig& config);

} // namespace bags
