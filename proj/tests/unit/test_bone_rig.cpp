#include "bags/bone_rig.hpp"
#include "bags/error.hpp"
#include "bags/gaussian_cloud.hpp"
#include "bags/parallel.hpp"
#include "bags/renderer.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace bags;
using bags::testing::central_difference;
using bags::testing::grad_close;

namespace {

BonePose random_pose(std::mt19937_64& rng, std::size_t bones, double spread = 0.6) {
    std::uniform_real_distribution<double> pos(-spread, spread);
    std::uniform_real_distribution<double> prec(1.0, 6.0);
    BonePose p;
    p.resize(bones);
    for (std::size_t b = 0; b < bones; ++b) {
        p.centers[b] = Vec3(pos(rng), pos(rng), pos(rng));
        p.precision[b] = Vec3(prec(rng), prec(rng), prec(rng));
        p.quaternions[b] = bags::testing::random_quaternion(rng);
        p.rotations[b] = quat_to_rotation(p.quaternions[b]);
    }
    return p;
}

std::vector<RigidTransform> random_deltas(std::mt19937_64& rng, std::size_t bones) {
    std::uniform_real_distribution<double> t(-0.3, 0.3);
    std::vector<RigidTransform> d(bones);
    for (auto& x : d) {
        x.rotation = bags::testing::random_rotation(rng);
        x.translation = Vec3(t(rng), t(rng), t(rng));
    }
    return d;
}

BoneRig small_rig(std::size_t bones, std::uint64_t seed, double final_scale = 1e-3) {
    BoneRigConfig cfg;
    cfg.bones = bones;
    cfg.frequencies = 3;
    cfg.hidden_width = 8;
    cfg.layers = 3;
    cfg.final_scale = final_scale;
    cfg.seed = seed;
    std::vector<Vec3> centers;
    std::vector<Vec3> log_prec;
    for (std::size_t b = 0; b < bones; ++b) {
        centers.emplace_back(0.3 * b, -0.1 * b, 0.05);
        log_prec.emplace_back(std::log(4.0), std::log(5.0), std::log(6.0));
    }
    return BoneRig(cfg, centers, log_prec, 0.5);
}

double frobenius(const Mat3& a, const Mat3& b) { return a.cwiseProduct(b).sum(); }

} // namespace

TEST(TimeEmbedding, ZeroTime) {
    const auto e = time_embedding(0.0, 4);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(e[k], 0.0);
        EXPECT_EQ(e[4 + k], 1.0);
    }
}

TEST(TimeEmbedding, UnitTimeFirstFrequency) {
    const auto e = time_embedding(1.0, 2);
    EXPECT_NEAR(e[0], 0.0, 1e-15);
    EXPECT_EQ(e[2], -1.0);
}

TEST(TimeEmbedding, ClosedFormAtPointThree) {
    const auto e = time_embedding(0.3, 4);
    const double pi = std::numbers::pi;
    const double expected_sin[4] = {std::sin(0.3 * pi), std::sin(0.6 * pi), std::sin(1.2 * pi),
                                    std::sin(2.4 * pi)};
    const double expected_cos[4] = {std::cos(0.3 * pi), std::cos(0.6 * pi), std::cos(1.2 * pi),
                                    std::cos(2.4 * pi)};
    for (int k = 0; k < 4; ++k) {
        EXPECT_NEAR(e[k], expected_sin[k], 1e-15);
        EXPECT_NEAR(e[4 + k], expected_cos[k], 1e-15);
    }
}

TEST(TimeEmbedding, OutOfRangeThrows) {
    EXPECT_THROW(time_embedding(-0.01, 3), ConfigError);
    EXPECT_THROW(time_embedding(1.5, 3), ConfigError);
}

TEST(BonePose, FreshRigIsNearItsInitialization) {
    const BoneRig rig = small_rig(3, 1);
    const BonePose p = predict_bone_pose(rig, 0.2);
    for (std::size_t b = 0; b < 3; ++b) {
        EXPECT_LT((p.rotations[b] - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-2);
        EXPECT_LT((p.centers[b] - rig.center_offsets()[b]).norm(), 1e-2);
        EXPECT_NEAR(std::log(p.precision[b][0]), std::log(4.0), 1e-2);
        EXPECT_LT((p.rotations[b].transpose() * p.rotations[b] - Mat3::Identity()).cwiseAbs().maxCoeff(),
                  1e-12);
    }
}

TEST(BonePose, SameTimeIsDeterministic) {
    const BoneRig rig = small_rig(2, 4, 0.5);
    const BonePose a = predict_bone_pose(rig, 0.37);
    const BonePose b = predict_bone_pose(rig, 0.37);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(a.centers[i], b.centers[i]);
        EXPECT_EQ(a.rotations[i], b.rotations[i]);
        EXPECT_EQ(a.precision[i], b.precision[i]);
    }
}

TEST(BonePose, CenterNetworkOnlyMovesCenters) {
    BoneRig rig = small_rig(2, 5, 0.5);
    const BonePose before = predict_bone_pose(rig, 0.6);
    rig.center_net.layers()[0].weight[3] += 0.7;
    const BonePose after = predict_bone_pose(rig, 0.6);
    EXPECT_NE(before.centers[0], after.centers[0]);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(before.rotations[i], after.rotations[i]);
        EXPECT_EQ(before.precision[i], after.precision[i]);
    }
}

TEST(BonePose, CanonicalMatchesTimeAtInitialization) {
    const BoneRig rig = small_rig(3, 2, 0.5);
    const BonePose c = canonical_bone_pose(rig);
    const BonePose t = predict_bone_pose(rig, 0.5);
    for (std::size_t b = 0; b < 3; ++b) {
        EXPECT_EQ(c.centers[b], t.centers[b]);
    }
}

TEST(Skinning, PointOnBoneDominates) {
    BonePose p;
    p.resize(3);
    p.centers = {Vec3(0, 0, 0), Vec3(5, 0, 0), Vec3(0, 5, 0)};
    const auto w = skinning_weights(Vec3::Zero(), p);
    EXPECT_GT(w[0], 1.0 - 1e-9);
}

TEST(Skinning, MirrorSymmetricBonesSplitEvenly) {
    BonePose p;
    p.resize(2);
    p.centers = {Vec3(-0.4, 0.1, 0), Vec3(0.4, 0.1, 0)};
    const auto w = skinning_weights(Vec3(0.0, 0.3, 0.2), p);
    EXPECT_DOUBLE_EQ(w[0], 0.5);
    EXPECT_DOUBLE_EQ(w[1], 0.5);
}

TEST(Skinning, MatchesDirectEvaluation) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const BonePose p = random_pose(rng, 3);
        const Vec3 x = Vec3::Random() * 0.5;
        const auto w = skinning_weights(x, p);
        double dist[3];
        double denom = 0.0;
        for (int b = 0; b < 3; ++b) {
            const Vec3 r = x - p.centers[b];
            const Mat3 m = p.rotations[b];
            dist[b] = r.transpose() * m.transpose() * p.precision[b].asDiagonal() * m * r;
            denom += std::exp(-dist[b]);
        }
        double sum = 0.0;
        for (int b = 0; b < 3; ++b) {
            EXPECT_NEAR(w[b], std::exp(-dist[b]) / denom, 1e-12);
            EXPECT_GE(w[b], 0.0);
            sum += w[b];
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(BoneDelta, SamePoseIsIdentity) {
    std::mt19937_64 rng(7);
    const BonePose p = random_pose(rng, 4);
    for (const auto& d : bone_delta_transforms(p, p)) {
        EXPECT_LT((d.rotation - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-14);
        EXPECT_LT(d.translation.cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(BoneDelta, PureTranslation) {
    std::mt19937_64 rng(8);
    const BonePose c = random_pose(rng, 1);
    BonePose t = c;
    t.centers[0] += Vec3(0.1, -0.2, 0.3);
    const auto d = bone_delta_transforms(c, t);
    EXPECT_LT((d[0].rotation - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((d[0].translation - Vec3(0.1, -0.2, 0.3)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(BoneDelta, RotationAboutCenter) {
    std::mt19937_64 rng(9);
    const BonePose c = random_pose(rng, 1);
    const Mat3 r = quat_to_rotation(quat_from_axis_angle(Vec3(1, 2, 3), 0.7));
    BonePose t = c;
    t.rotations[0] = r * c.rotations[0];
    const auto d = bone_delta_transforms(c, t);
    for (int i = 0; i < 10; ++i) {
        const Vec3 x = Vec3::Random();
        const Vec3 expected = r * (x - c.centers[0]) + c.centers[0];
        EXPECT_LT((d[0].apply(x) - expected).norm(), 1e-12);
    }
    EXPECT_LT((d[0].rotation.transpose() * d[0].rotation - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Warp, SingleBoneIsRigid) {
    std::mt19937_64 rng(10);
    const BonePose c = random_pose(rng, 1);
    const auto d = random_deltas(rng, 1);
    const Mat3 cov = build_covariance(bags::testing::random_quaternion(rng), Vec3(-1, -2, -1.5));
    const Vec3 x(0.2, -0.1, 0.4);
    const WarpSample s = warp_gaussian(x, cov, c, d);
    EXPECT_LT((s.mean - d[0].apply(x)).norm(), 1e-14);
    EXPECT_LT((s.jacobian - d[0].rotation).cwiseAbs().maxCoeff(), 1e-14);
    const Mat3 expected = d[0].rotation * cov * d[0].rotation.transpose();
    EXPECT_LT((s.covariance - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Warp, IdentityTransformsAreExactlyIdentity) {
    std::mt19937_64 rng(11);
    const BonePose c = random_pose(rng, 5);
    const std::vector<RigidTransform> d(5);
    for (int i = 0; i < 50; ++i) {
        const Vec3 x = Vec3::Random();
        const Mat3 cov = build_covariance(bags::testing::random_quaternion(rng), Vec3::Random());
        const WarpSample s = warp_gaussian(x, cov, c, d);
        EXPECT_EQ(s.mean, x);
        EXPECT_EQ(s.jacobian, Mat3::Identity());
        EXPECT_EQ(s.covariance, cov);
    }
}

TEST(Warp, JacobianMatchesFiniteDifferences) {
    std::mt19937_64 rng(12);
    for (std::size_t bones : {2u, 4u, 8u}) {
        const BonePose c = random_pose(rng, bones);
        const auto d = random_deltas(rng, bones);
        for (int i = 0; i < 25; ++i) {
            const Vec3 x = Vec3::Random() * 0.6;
            const WarpSample s = warp_gaussian(x, Mat3::Identity(), c, d);
            const double h = 1e-6;
            for (int k = 0; k < 3; ++k) {
                Vec3 xp = x;
                Vec3 xm = x;
                xp[k] += h;
                xm[k] -= h;
                const Vec3 col = (warp_point(xp, c, d) - warp_point(xm, c, d)) / (2 * h);
                EXPECT_LT((col - s.jacobian.col(k)).cwiseAbs().maxCoeff(), 1e-4);
            }
            EXPECT_LT((s.covariance - s.covariance.transpose()).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(WarpBackward, ZeroUpstreamGivesZero) {
    std::mt19937_64 rng(13);
    const BonePose c = random_pose(rng, 3);
    const auto d = random_deltas(rng, 3);
    BonePoseGrad gc;
    gc.resize(3);
    std::vector<RigidTransform> gd(3, RigidTransform{Mat3::Zero(), Vec3::Zero()});
    const auto g = warp_gaussian_backward(Vec3(0.1, 0.2, 0.3), Mat3::Identity() * 0.01, c, d,
                                          Vec3::Zero(), Mat3::Zero(), Mat3::Zero(), gc, gd);
    EXPECT_TRUE(g.mean.isZero(0.0));
    EXPECT_TRUE(g.covariance.isZero(0.0));
    for (std::size_t b = 0; b < 3; ++b) {
        EXPECT_TRUE(gc.centers[b].isZero(0.0));
        EXPECT_TRUE(gc.rotations[b].isZero(0.0));
        EXPECT_TRUE(gd[b].rotation.isZero(0.0));
    }
}

TEST(WarpBackward, MatchesFiniteDifferences) {
    std::mt19937_64 rng(14);
    for (std::size_t bones : {1u, 2u, 3u}) {
        for (int trial = 0; trial < 4; ++trial) {
            BonePose c = random_pose(rng, bones, 0.4);
            auto d = random_deltas(rng, bones);
            Vec3 x = Vec3::Random() * 0.4;
            Mat3 cov = build_covariance(bags::testing::random_quaternion(rng), Vec3(-1.0, -1.5, -2.0));
            const Vec3 gy = Vec3::Random();
            const Mat3 gj = bags::testing::random_matrix(rng);
            const Mat3 gs = bags::testing::random_matrix(rng);
            auto loss = [&]() {
                const WarpSample s = warp_gaussian(x, cov, c, d);
                return gy.dot(s.mean) + frobenius(gj, s.jacobian) + frobenius(gs, s.covariance);
            };
            BonePoseGrad gc;
            gc.resize(bones);
            std::vector<RigidTransform> gd(bones, RigidTransform{Mat3::Zero(), Vec3::Zero()});
            const auto g = warp_gaussian_backward(x, cov, c, d, gy, gj, gs, gc, gd);
            for (int k = 0; k < 3; ++k) {
                EXPECT_TRUE(grad_close(g.mean[k], central_difference(x[k], loss))) << "mean " << k;
            }
            for (int k = 0; k < 9; ++k) {
                double& entry = cov(k / 3, k % 3);
                EXPECT_TRUE(grad_close(g.covariance(k / 3, k % 3), central_difference(entry, loss)));
            }
            for (std::size_t b = 0; b < bones; ++b) {
                for (int k = 0; k < 3; ++k) {
                    EXPECT_TRUE(grad_close(gc.centers[b][k], central_difference(c.centers[b][k], loss)))
                        << "center " << b;
                    EXPECT_TRUE(grad_close(gc.precision[b][k], central_difference(c.precision[b][k], loss)))
                        << "precision " << b;
                    EXPECT_TRUE(grad_close(gd[b].translation[k], central_difference(d[b].translation[k], loss)));
                }
                for (int k = 0; k < 9; ++k) {
                    EXPECT_TRUE(grad_close(gc.rotations[b](k / 3, k % 3),
                                           central_difference(c.rotations[b](k / 3, k % 3), loss)))
                        << "rotation " << b;
                    EXPECT_TRUE(grad_close(gd[b].rotation(k / 3, k % 3),
                                           central_difference(d[b].rotation(k / 3, k % 3), loss)));
                }
            }
        }
    }
}

TEST(WarpBackward, SingleBoneRotationGradientIsOuterProduct) {
    std::mt19937_64 rng(15);
    const BonePose c = random_pose(rng, 1);
    const auto d = random_deltas(rng, 1);
    const Vec3 x(0.3, -0.2, 0.1);
    BonePoseGrad gc;
    gc.resize(1);
    std::vector<RigidTransform> gd(1, RigidTransform{Mat3::Zero(), Vec3::Zero()});
    warp_gaussian_backward(x, Mat3::Identity(), c, d, Vec3::UnitX(), Mat3::Zero(), Mat3::Zero(), gc, gd);
    const Mat3 expected = Vec3::UnitX() * x.transpose();
    EXPECT_LT((gd[0].rotation - expected).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((gd[0].translation - Vec3::UnitX()).norm(), 1e-14);
}

TEST(BoneDeltaBackward, MatchesFiniteDifferences) {
    std::mt19937_64 rng(16);
    BonePose c = random_pose(rng, 2);
    BonePose t = random_pose(rng, 2);
    std::vector<RigidTransform> g(2);
    for (auto& x : g) {
        x.rotation = bags::testing::random_matrix(rng);
        x.translation = Vec3::Random();
    }
    auto loss = [&]() {
        const auto d = bone_delta_transforms(c, t);
        double s = 0.0;
        for (std::size_t b = 0; b < 2; ++b) {
            s += frobenius(g[b].rotation, d[b].rotation) + g[b].translation.dot(d[b].translation);
        }
        return s;
    };
    BonePoseGrad gc;
    BonePoseGrad gt;
    gc.resize(2);
    gt.resize(2);
    bone_delta_backward(c, t, g, gc, gt);
    for (std::size_t b = 0; b < 2; ++b) {
        for (int k = 0; k < 3; ++k) {
            EXPECT_TRUE(grad_close(gc.centers[b][k], central_difference(c.centers[b][k], loss)));
            EXPECT_TRUE(grad_close(gt.centers[b][k], central_difference(t.centers[b][k], loss)));
        }
        for (int k = 0; k < 9; ++k) {
            EXPECT_TRUE(grad_close(gc.rotations[b](k / 3, k % 3),
                                   central_difference(c.rotations[b](k / 3, k % 3), loss)));
            EXPECT_TRUE(grad_close(gt.rotations[b](k / 3, k % 3),
                                   central_difference(t.rotations[b](k / 3, k % 3), loss)));
        }
    }
}

TEST(RigBackward, MatchesFiniteDifferences) {
    BoneRig rig = small_rig(2, 21, 0.5);
    std::mt19937_64 rng(17);
    BonePoseGrad gt;
    BonePoseGrad gc;
    gt.resize(2);
    gc.resize(2);
    for (BonePoseGrad* g : {&gt, &gc}) {
        for (std::size_t b = 0; b < 2; ++b) {
            g->centers[b] = Vec3::Random();
            g->precision[b] = Vec3::Random();
            g->rotations[b] = bags::testing::random_matrix(rng);
        }
    }
    const double t = 0.3;
    auto pose_loss = [&](const BonePose& p, const BonePoseGrad& g) {
        double s = 0.0;
        for (std::size_t b = 0; b < 2; ++b) {
            s += g.centers[b].dot(p.centers[b]) + g.precision[b].dot(p.precision[b]) +
                 frobenius(g.rotations[b], p.rotations[b]);
        }
        return s;
    };
    auto loss = [&]() {
        return pose_loss(predict_bone_pose(rig, t), gt) + pose_loss(canonical_bone_pose(rig), gc);
    };
    rig.zero_grad();
    const RigPoses poses = rig_forward(rig, t);
    rig_backward(rig, poses, gt, gc);
    for (auto* p : rig.parameters()) {
        const auto g = p->grad();
        std::vector<double> analytic(g.begin(), g.end());
        for (std::size_t i = 0; i < p->size(); i += 3) {
            EXPECT_TRUE(grad_close(analytic[i], central_difference((*p)[i], loss)));
        }
    }
}

TEST(WarpCloud, BackwardIndependentOfThreadCount) {
    std::mt19937_64 rng(18);
    const BonePose c = random_pose(rng, 4);
    const auto d = random_deltas(rng, 4);
    std::vector<Vec3> means(1000);
    std::vector<Mat3> covs(1000, Mat3::Identity() * 0.01);
    std::vector<Vec3> gm(1000);
    for (std::size_t i = 0; i < means.size(); ++i) {
        means[i] = Vec3::Random();
        gm[i] = Vec3::Random();
    }
    set_thread_count(1);
    const auto a = warp_cloud_backward(means, covs, c, d, gm, {}, {});
    set_thread_count(3);
    const auto b = warp_cloud_backward(means, covs, c, d, gm, {}, {});
    set_thread_count(0);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(a.canonical.centers[k], b.canonical.centers[k]);
        EXPECT_EQ(a.deltas[k].rotation, b.deltas[k].rotation);
    }
}

TEST(WarpRender, SingleBoneMatchesRigidRender) {
    std::mt19937_64 rng(19);
    const GaussianCloud cloud = bags::testing::random_cloud(rng, 40, 0.4);
    const BonePose c = random_pose(rng, 1);
    std::vector<RigidTransform> d(1);
    d[0].rotation = quat_to_rotation(quat_from_axis_angle(Vec3(0, 1, 0.3), 0.5));
    d[0].translation = Vec3(0.05, -0.02, 0.1);
    SplatSet canonical = SplatSet::from_cloud(cloud);
    const WarpResult w = warp_cloud(canonical.means, canonical.covariances, c, d);
    SplatSet warped = canonical;
    warped.means = w.means;
    warped.covariances = w.covariances;
    SplatSet rigid = canonical;
    for (std::size_t i = 0; i < rigid.size(); ++i) {
        rigid.means[i] = d[0].apply(canonical.means[i]);
        rigid.covariances[i] = d[0].rotation * canonical.covariances[i] * d[0].rotation.transpose();
    }
    const Camera cam = bags::testing::front_camera(48, 48, 45.0);
    const auto a = render_forward(warped, cam, Vec3::Zero());
    const auto b = render_forward(rigid, cam, Vec3::Zero());
    for (std::size_t i = 0; i < a.color.data.size(); ++i) {
        ASSERT_NEAR(a.color.data[i], b.color.data[i], 1e-6);
    }
}

TEST(FarthestPointSampling, SpreadsOut) {
    std::vector<Vec3> pts{Vec3(0, 0, 0), Vec3(0.01, 0, 0), Vec3(1, 0, 0), Vec3(-1, 0, 0)};
    const auto s = farthest_point_sampling(pts, 3);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(s[0], Vec3(0, 0, 0));
    EXPECT_EQ(std::abs(s[1].x()), 1.0);
    EXPECT_EQ(std::abs(s[2].x()), 1.0);
}
