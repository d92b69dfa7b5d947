#include "bags/model.hpp"

#include "bags/error.hpp"
#include "test_support.hpp"

#include <numbers>

namespace bags {
namespace {

using testing::central_difference;
using testing::grad_close;

BonePose random_pose(std::mt19937_64& rng, std::size_t bones) {
    std::uniform_real_distribution<double> u(-0.4, 0.4);
    std::uniform_real_distribution<double> p(2.0, 8.0);
    BonePose pose;
    pose.resize(bones);
    for (std::size_t b = 0; b < bones; ++b) {
        pose.centers[b] = Vec3(u(rng), u(rng), u(rng));
        pose.precision[b] = Vec3(p(rng), p(rng), p(rng));
        pose.quaternions[b] = testing::random_quaternion(rng);
        pose.rotations[b] = quat_to_rotation(pose.quaternions[b]);
    }
    return pose;
}

RigidTransform random_root(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    return {testing::random_rotation(rng), Vec3(u(rng), u(rng), u(rng))};
}

// Random linear functional over every posed quantity, with its coefficients as SplatGrads.
struct Probe {
    SplatGrads grads;
    std::vector<Mat3> jacobian;

    double operator()(const PosedSplats& p) const {
        double s = 0.0;
        const auto jac = p.jacobians();
        for (std::size_t i = 0; i < p.size(); ++i) {
            s += grads.means[i].dot(p.world.means[i]);
            s += (grads.covariances[i].array() * p.world.covariances[i].array()).sum();
            s += grads.opacities[i] * p.world.opacities[i];
            s += grads.colors[i].dot(p.world.colors[i]);
            if (!jacobian.empty()) {
                s += (jacobian[i].array() * jac[i].array()).sum();
            }
        }
        return s;
    }
};

Probe random_probe(std::mt19937_64& rng, std::size_t n, bool with_jacobian) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Probe pr;
    pr.grads.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        pr.grads.means[i] = Vec3(u(rng), u(rng), u(rng));
        pr.grads.covariances[i] = testing::random_matrix(rng);
        pr.grads.opacities[i] = u(rng);
        pr.grads.colors[i] = Vec3(u(rng), u(rng), u(rng));
        if (with_jacobian) {
            pr.jacobian.push_back(testing::random_matrix(rng));
        }
    }
    return pr;
}

TEST(Model, ResetRootsIsIdentity) {
    Model m;
    m.reset_roots({0.0, 0.5, 1.0});
    for (std::size_t f = 0; f < 3; ++f) {
        const RigidTransform r = m.root_of(f);
        EXPECT_EQ(r.rotation, Mat3::Identity());
        EXPECT_EQ(r.translation, Vec3::Zero());
    }
    EXPECT_THROW(m.root_of(3), DimensionError);
}

TEST(Model, ResetRootsRejectsNonIncreasingTimes) {
    Model m;
    EXPECT_THROW(m.reset_roots({0.0, 0.5, 0.5}), ConfigError);
}

TEST(Model, RootAtInterpolatesAndClamps) {
    Model m;
    m.reset_roots({0.0, 1.0});
    const Vec4 q = quat_from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 2.0);
    for (int k = 0; k < 4; ++k) {
        m.root_rotations.at(1, k) = q[k];
    }
    m.root_translations.at(1, 0) = 2.0;
    const RigidTransform mid = m.root_at(0.5);
    const Mat3 expect = quat_to_rotation(quat_from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 4.0));
    EXPECT_LT((mid.rotation - expect).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_DOUBLE_EQ(mid.translation.x(), 1.0);
    EXPECT_EQ(m.root_at(-1.0).rotation, m.root_of(0).rotation);
    EXPECT_EQ(m.root_at(2.0).translation, m.root_of(1).translation);
}

TEST(PoseCloud, NoDeltasAndIdentityRootReturnsCanonical) {
    std::mt19937_64 rng(3);
    const GaussianCloud cloud = testing::random_cloud(rng, 20);
    const PosedSplats p = pose_cloud(cloud, BonePose{}, {}, RigidTransform{});
    const SplatSet ref = SplatSet::from_cloud(cloud);
    EXPECT_FALSE(p.articulated);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        EXPECT_EQ(p.world.means[i], ref.means[i]);
        EXPECT_EQ(p.world.covariances[i], ref.covariances[i]);
    }
    for (const Mat3& j : p.jacobians()) {
        EXPECT_EQ(j, Mat3::Identity());
    }
}

TEST(PoseCloud, RootIsARigidMotion) {
    std::mt19937_64 rng(4);
    const GaussianCloud cloud = testing::random_cloud(rng, 10);
    const RigidTransform root = random_root(rng);
    const PosedSplats p = pose_cloud(cloud, BonePose{}, {}, root);
    const SplatSet ref = SplatSet::from_cloud(cloud);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        EXPECT_LT((p.world.means[i] - (root.rotation * ref.means[i] + root.translation)).norm(), 1e-12);
        const Mat3 c = root.rotation * ref.covariances[i] * root.rotation.transpose();
        EXPECT_LT((p.world.covariances[i] - c).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(PoseCloud, IdenticalPosesGiveCanonicalGeometry) {
    std::mt19937_64 rng(5);
    const GaussianCloud cloud = testing::random_cloud(rng, 15);
    const BonePose pose = random_pose(rng, 3);
    const PosedSplats p = pose_from_poses(cloud, pose, pose, RigidTransform{});
    const SplatSet ref = SplatSet::from_cloud(cloud);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        EXPECT_LT((p.world.means[i] - ref.means[i]).norm(), 1e-12);
    }
}

class PosedBackward : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PosedBackward, MatchesFiniteDifferences) {
    const std::size_t bones = GetParam();
    std::mt19937_64 rng(100 + bones);
    GaussianCloud cloud = testing::random_cloud(rng, 5);
    BonePose canonical = random_pose(rng, bones);
    BonePose target = random_pose(rng, bones);
    RigidTransform root = random_root(rng);
    const Probe probe = random_probe(rng, cloud.size(), true);

    auto loss = [&] { return probe(pose_from_poses(cloud, canonical, target, root)); };
    const PosedSplats posed = pose_from_poses(cloud, canonical, target, root);
    const PosedGrads g = posed_backward(cloud, posed, probe.grads, probe.jacobian);

    for (std::size_t i = 0; i < cloud.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            EXPECT_TRUE(grad_close(g.cloud.position[i][k], central_difference(cloud.positions.at(i, k), loss)));
            EXPECT_TRUE(grad_close(g.cloud.log_scale[i][k], central_difference(cloud.log_scales.at(i, k), loss)));
            EXPECT_TRUE(grad_close(g.cloud.color[i][k], central_difference(cloud.colors.at(i, k), loss)));
        }
        for (int k = 0; k < 4; ++k) {
            EXPECT_TRUE(grad_close(g.cloud.rotation[i][k], central_difference(cloud.rotations.at(i, k), loss)));
        }
        EXPECT_TRUE(grad_close(g.cloud.opacity_logit[i], central_difference(cloud.opacity_logits.at(i, 0), loss)));
    }
    for (std::size_t b = 0; b < bones; ++b) {
        for (int k = 0; k < 3; ++k) {
            EXPECT_TRUE(grad_close(g.target_pose.centers[b][k], central_difference(target.centers[b][k], loss)));
            EXPECT_TRUE(grad_close(g.canonical_pose.centers[b][k], central_difference(canonical.centers[b][k], loss)));
            EXPECT_TRUE(
                grad_close(g.canonical_pose.precision[b][k], central_difference(canonical.precision[b][k], loss)));
        }
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                EXPECT_TRUE(
                    grad_close(g.target_pose.rotations[b](r, c), central_difference(target.rotations[b](r, c), loss)));
                EXPECT_TRUE(grad_close(g.canonical_pose.rotations[b](r, c),
                                       central_difference(canonical.rotations[b](r, c), loss)));
            }
        }
    }
    for (int r = 0; r < 3; ++r) {
        EXPECT_TRUE(grad_close(g.root_translation[r], central_difference(root.translation[r], loss)));
        for (int c = 0; c < 3; ++c) {
            EXPECT_TRUE(grad_close(g.root_rotation(r, c), central_difference(root.rotation(r, c), loss)));
        }
    }
}

INSTANTIATE_TEST_SUITE_P(Bones, PosedBackward, ::testing::Values(1, 2, 4));

TEST(PosedBackward, UnarticulatedRootMatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    GaussianCloud cloud = testing::random_cloud(rng, 6);
    RigidTransform root = random_root(rng);
    const Probe probe = random_probe(rng, cloud.size(), false);
    auto loss = [&] { return probe(pose_cloud(cloud, BonePose{}, {}, root)); };
    const PosedSplats posed = pose_cloud(cloud, BonePose{}, {}, root);
    const PosedGrads g = posed_backward(cloud, posed, probe.grads, {});
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            EXPECT_TRUE(grad_close(g.cloud.position[i][k], central_difference(cloud.positions.at(i, k), loss)));
        }
    }
    for (int r = 0; r < 3; ++r) {
        EXPECT_TRUE(grad_close(g.root_translation[r], central_difference(root.translation[r], loss)));
        for (int c = 0; c < 3; ++c) {
            EXPECT_TRUE(grad_close(g.root_rotation(r, c), central_difference(root.rotation(r, c), loss)));
        }
    }
}

TEST(AddSplatGrads, SumsAndChecksSize) {
    SplatGrads a;
    SplatGrads b;
    a.resize(2);
    b.resize(2);
    a.means[0] = Vec3(1.0, 2.0, 3.0);
    b.means[0] = Vec3(1.0, 1.0, 1.0);
    b.opacities[1] = 0.5;
    add_splat_grads(a, b);
    EXPECT_EQ(a.means[0], Vec3(2.0, 3.0, 4.0));
    EXPECT_EQ(a.opacities[1], 0.5);
    SplatGrads c;
    c.resize(3);
    EXPECT_THROW(add_splat_grads(a, c), DimensionError);
}

TEST(RenderModel, MatchesPoseModel) {
    std::mt19937_64 rng(8);
    Model m;
    m.cloud = testing::random_cloud(rng, 30);
    BoneRigConfig rc;
    rc.bones = 2;
    rc.frequencies = 2;
    rc.hidden_width = 8;
    rc.layers = 2;
    m.rig = BoneRig(rc, {Vec3(-0.3, 0.0, 0.0), Vec3(0.3, 0.0, 0.0)}, {Vec3::Constant(2.0), Vec3::Constant(2.0)}, 0.5);
    m.reset_roots({0.0, 1.0});
    const Camera cam = testing::front_camera(24, 24, 20.0);
    const RenderOutput a = render_model(m, 0.3, cam);
    const RenderOutput b = render_forward(pose_model(m, 0.3).world, cam, m.background);
    EXPECT_EQ(a.color.data, b.color.data);
}

} // namespace
} // namespace bags
