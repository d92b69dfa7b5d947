#include "bags/model.hpp"

#include "bags/error.hpp"
#include "bags/parallel.hpp"

#include <algorithm>

namespace bags {

void Model::reset_roots(std::vector<double> times) {
    for (std::size_t i = 1; i < times.size(); ++i) {
        if (!(times[i] > times[i - 1])) {
            throw ConfigError("frame times must be strictly increasing");
        }
    }
    frame_times = std::move(times);
    const std::size_t f = frame_times.size();
    root_rotations = DenseArray({f, 4});
    root_translations = DenseArray({f, 3});
    for (std::size_t i = 0; i < f; ++i) {
        root_rotations.at(i, 0) = 1.0;
    }
}

RigidTransform Model::root_of(std::size_t frame) const {
    if (frame >= frame_count()) {
        throw DimensionError("root_of: frame " + std::to_string(frame) + " out of range");
    }
    const Vec4 q(root_rotations.at(frame, 0), root_rotations.at(frame, 1), root_rotations.at(frame, 2),
                 root_rotations.at(frame, 3));
    return {quat_to_rotation(q),
            Vec3(root_translations.at(frame, 0), root_translations.at(frame, 1), root_translations.at(frame, 2))};
}

RigidTransform Model::root_at(double t) const {
    const std::size_t f = frame_count();
    if (f == 0) {
        return {};
    }
    if (t <= frame_times.front()) {
        return root_of(0);
    }
    if (t >= frame_times.back()) {
        return root_of(f - 1);
    }
    const auto it = std::upper_bound(frame_times.begin(), frame_times.end(), t);
    const std::size_t hi = static_cast<std::size_t>(it - frame_times.begin());
    const std::size_t lo = hi - 1;
    const double u = (t - frame_times[lo]) / (frame_times[hi] - frame_times[lo]);
    auto quat = [&](std::size_t i) {
        return quat_normalized(Vec4(root_rotations.at(i, 0), root_rotations.at(i, 1), root_rotations.at(i, 2),
                                    root_rotations.at(i, 3)));
    };
    const RigidTransform a = root_of(lo);
    const RigidTransform b = root_of(hi);
    return {quat_to_rotation(quat_slerp(quat(lo), quat(hi), u)), (1.0 - u) * a.translation + u * b.translation};
}

std::vector<Mat3> PosedSplats::jacobians() const {
    if (articulated) {
        return warp.jacobians;
    }
    return std::vector<Mat3>(size(), Mat3::Identity());
}

PosedSplats pose_cloud(const GaussianCloud& cloud, const BonePose& canonical,
                       std::span<const RigidTransform> deltas, const RigidTransform& root) {
    PosedSplats p;
    p.canonical = SplatSet::from_cloud(cloud);
    p.root = root;
    p.articulated = !deltas.empty();
    p.world = p.canonical;
    if (p.articulated) {
        p.canonical_pose = canonical;
        p.deltas.assign(deltas.begin(), deltas.end());
        p.warp = warp_cloud(p.canonical.means, p.canonical.covariances, canonical, deltas);
        p.world.means = p.warp.means;
        p.world.covariances = p.warp.covariances;
    }
    const Mat3& r = root.rotation;
    parallel_for(p.world.size(), 1024, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            p.world.means[i] = r * p.world.means[i] + root.translation;
            const Mat3 c = r * p.world.covariances[i] * r.transpose();
            p.world.covariances[i] = 0.5 * (c + c.transpose());
        }
    });
    return p;
}

PosedSplats pose_from_poses(const GaussianCloud& cloud, const BonePose& canonical,
                            const BonePose& target, const RigidTransform& root) {
    const auto deltas = bone_delta_transforms(canonical, target);
    PosedSplats p = pose_cloud(cloud, canonical, deltas, root);
    p.target_pose = target;
    return p;
}

PosedSplats pose_model(const Model& model, double t) {
    return pose_from_poses(model.cloud, canonical_bone_pose(model.rig), predict_bone_pose(model.rig, t),
                           model.root_at(t));
}

PosedSplats pose_model_frame(const Model& model, std::size_t frame) {
    const double t = model.frame_times.at(frame);
    return pose_from_poses(model.cloud, canonical_bone_pose(model.rig), predict_bone_pose(model.rig, t),
                           model.root_of(frame));
}

PosedGrads posed_backward(const GaussianCloud& cloud, const PosedSplats& posed,
                          const SplatGrads& world_grads, std::span<const Mat3> jacobian_grads) {
    const std::size_t n = posed.size();
    if (world_grads.size() != n || cloud.size() != n) {
        throw DimensionError("posed_backward: gradient count differs from splat count");
    }
    if (!jacobian_grads.empty() && jacobian_grads.size() != n) {
        throw DimensionError("posed_backward: Jacobian gradient count differs from splat count");
    }
    PosedGrads out;
    const Mat3& r = posed.root.rotation;

    // Undo the root: y' = R y + T, S' = R S R^T.
    std::vector<Vec3> g_mean(n);
    std::vector<Mat3> g_cov(n);
    const std::vector<Vec3>& pre_means = posed.articulated ? posed.warp.means : posed.canonical.means;
    const std::vector<Mat3>& pre_covs =
        posed.articulated ? posed.warp.covariances : posed.canonical.covariances;
    constexpr std::size_t chunk = 256;
    const std::size_t chunks = (n + chunk - 1) / chunk;
    std::vector<Mat3> chunk_rot(chunks, Mat3::Zero());
    std::vector<Vec3> chunk_trans(chunks, Vec3::Zero());
    parallel_for(chunks, 1, [&](std::size_t cb, std::size_t ce) {
        for (std::size_t c = cb; c < ce; ++c) {
            const std::size_t end = std::min(n, (c + 1) * chunk);
            for (std::size_t i = c * chunk; i < end; ++i) {
                const Vec3& gm = world_grads.means[i];
                const Mat3 gc = 0.5 * (world_grads.covariances[i] + world_grads.covariances[i].transpose());
                g_mean[i] = r.transpose() * gm;
                g_cov[i] = r.transpose() * gc * r;
                chunk_rot[c] += gm * pre_means[i].transpose() + 2.0 * gc * r * pre_covs[i];
                chunk_trans[c] += gm;
            }
        }
    });
    for (std::size_t c = 0; c < chunks; ++c) {
        out.root_rotation += chunk_rot[c];
        out.root_translation += chunk_trans[c];
    }

    SplatGrads canonical_grads;
    canonical_grads.opacities = world_grads.opacities;
    canonical_grads.colors = world_grads.colors;
    canonical_grads.view_grad_norm = world_grads.view_grad_norm;
    canonical_grads.visible = world_grads.visible;
    if (posed.articulated) {
        WarpCloudGrad wg = warp_cloud_backward(posed.canonical.means, posed.canonical.covariances,
                                               posed.canonical_pose, posed.deltas, g_mean, jacobian_grads, g_cov);
        canonical_grads.means = std::move(wg.means);
        canonical_grads.covariances = std::move(wg.covariances);
        out.canonical_pose = std::move(wg.canonical);
        out.target_pose.resize(posed.deltas.size());
        if (posed.target_pose.size() == posed.deltas.size()) {
            bone_delta_backward(posed.canonical_pose, posed.target_pose, wg.deltas, out.canonical_pose,
                                out.target_pose);
        }
    } else {
        canonical_grads.means = std::move(g_mean);
        canonical_grads.covariances = std::move(g_cov);
    }
    out.cloud = cloud_grads(cloud, canonical_grads);
    return out;
}

void add_splat_grads(SplatGrads& a, const SplatGrads& b) {
    if (a.size() != b.size()) {
        throw DimensionError("add_splat_grads: sizes differ");
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        a.means[i] += b.means[i];
        a.covariances[i] += b.covariances[i];
        a.opacities[i] += b.opacities[i];
        a.colors[i] += b.colors[i];
        a.view_grad_norm[i] += b.view_grad_norm[i];
        a.visible[i] = static_cast<std::uint8_t>(a.visible[i] | b.visible[i]);
    }
}

RenderOutput render_model(const Model& model, double t, const Camera& camera, const RasterConfig& config) {
    const PosedSplats posed = pose_model(model, t);
    return render_forward(posed.world, camera, model.background, config);
}

} // namespace bags
