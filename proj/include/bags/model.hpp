#pragma once

#include "bags/bone_rig.hpp"
#include "bags/camera.hpp"
#include "bags/gaussian_cloud.hpp"
#include "bags/renderer.hpp"

#include <optional>
#include <span>
#include <vector>

namespace bags {

/// Canonical cloud, bone rig and one rigid root transform per training frame.
struct Model {
    GaussianCloud cloud;
    BoneRig rig;
    DenseArray root_rotations;       // F x 4 quaternions (w, x, y, z)
    DenseArray root_translations;    // F x 3
    std::vector<double> frame_times; // normalized to [0, 1], strictly increasing
    Vec3 background = Vec3::Zero();

    std::size_t frame_count() const noexcept { return frame_times.size(); }
    /// Sets every root to the identity for `times`.
    void reset_roots(std::vector<double> times);
    RigidTransform root_of(std::size_t frame) const;
    /// Root at an arbitrary time: slerp/lerp between the bracketing frames, clamped at the ends.
    RigidTransform root_at(double t) const;
};

/// Splats after the bone warp and root transform, with what the backward pass needs.
struct PosedSplats {
    SplatSet canonical;
    SplatSet world;
    bool articulated = false;
    BonePose canonical_pose;
    BonePose target_pose;
    std::vector<RigidTransform> deltas;
    WarpResult warp;
    RigidTransform root;

    std::size_t size() const noexcept { return world.size(); }
    /// Warp Jacobians, or identities when the cloud was not articulated.
    std::vector<Mat3> jacobians() const;
};

/// Poses the cloud with explicit bone deltas. An empty `deltas` skips the warp.
PosedSplats pose_cloud(const GaussianCloud& cloud, const BonePose& canonical,
                       std::span<const RigidTransform> deltas, const RigidTransform& root);

/// Poses the cloud with the deltas that carry `canonical` onto `target`.
PosedSplats pose_from_poses(const GaussianCloud& cloud, const BonePose& canonical,
                            const BonePose& target, const RigidTransform& root);

/// Tape-free convenience: bones at time t, root interpolated at t.
PosedSplats pose_model(const Model& model, double t);
/// Same, with the root of a training frame.
PosedSplats pose_model_frame(const Model& model, std::size_t frame);

struct PosedGrads {
    RenderGrads cloud;
    BonePoseGrad canonical_pose;
    BonePoseGrad target_pose;
    Mat3 root_rotation = Mat3::Zero();
    Vec3 root_translation = Vec3::Zero();
};

/// Chains world-space splat gradients (and optional warp-Jacobian gradients) back to the
/// cloud parameters, both bone poses and the root transform.
PosedGrads posed_backward(const GaussianCloud& cloud, const PosedSplats& posed,
                          const SplatGrads& world_grads, std::span<const Mat3> jacobian_grads);

/// Adds `b` into `a`; both must cover the same splats.
void add_splat_grads(SplatGrads& a, const SplatGrads& b);

RenderOutput render_model(const Model& model, double t, const Camera& camera,
                          const RasterConfig& config = {});

} // namespace bags
