#include "bags/error.hpp"
#include "bags/losses.hpp"
#include "bags/svd3.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace bags;
using bags::testing::central_difference;
using bags::testing::grad_close;

namespace {

Image random_image(std::mt19937_64& rng, int w, int h, int c, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(w, h, c);
    for (double& v : img.data) {
        v = u(rng);
    }
    return img;
}

// Smooth pattern with visible structure at every scale used by the loss.
Image pattern(int w, int h, int shift) {
    Image img(w, h, 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double u = x + shift;
            for (int c = 0; c < 3; ++c) {
                img.at(x, y, c) = 0.5 + 0.25 * std::sin(0.45 * u + 0.8 * c) * std::cos(0.3 * y) +
                                  0.15 * std::sin(0.13 * (u + 2.0 * y));
            }
        }
    }
    return img;
}

double l1_distance(const Image& a, const Image& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        s += std::abs(a.data[i] - b.data[i]);
    }
    return s / static_cast<double>(a.data.size());
}

} // namespace

TEST(L1Loss, EqualImagesGiveZero) {
    std::mt19937_64 rng(1);
    const Image a = random_image(rng, 8, 6, 3);
    const auto r = l1_loss(a, a, Image(8, 6, 1, 1.0));
    EXPECT_EQ(r.value, 0.0);
    for (double g : r.grad.data) {
        EXPECT_EQ(g, 0.0);
    }
}

TEST(L1Loss, ConstantOffsetOverMask) {
    std::mt19937_64 rng(2);
    const Image target = random_image(rng, 10, 10, 3);
    Image render = target;
    Image mask(10, 10, 1);
    for (int y = 0; y < 10; ++y) {
        for (int x = 0; x < 5; ++x) {
            mask.at(x, y) = 1.0;
            for (int c = 0; c < 3; ++c) {
                render.at(x, y, c) += 0.5;
            }
        }
        for (int x = 5; x < 10; ++x) {
            render.at(x, y, 0) += 3.0; // outside the mask
        }
    }
    EXPECT_NEAR(l1_loss(render, target, mask).value, 0.5, 1e-15);
}

TEST(L1Loss, MatchesDirectSummation) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const Image a = random_image(rng, 9, 7, 3);
        const Image b = random_image(rng, 9, 7, 3);
        const Image m = random_image(rng, 9, 7, 1);
        double num = 0.0;
        double den = 0.0;
        for (int y = 0; y < 7; ++y) {
            for (int x = 0; x < 9; ++x) {
                den += 3.0 * m.at(x, y);
                for (int c = 0; c < 3; ++c) {
                    num += m.at(x, y) * std::abs(a.at(x, y, c) - b.at(x, y, c));
                }
            }
        }
        EXPECT_NEAR(l1_loss(a, b, m).value, num / den, 1e-14);
    }
}

TEST(L1Loss, EmptyMaskThrows) {
    const Image a(4, 4, 3);
    EXPECT_THROW(l1_loss(a, a, Image(4, 4, 1)), ConfigError);
}

TEST(L1Loss, ShapeMismatchThrows) {
    EXPECT_THROW(l1_loss(Image(4, 4, 3), Image(4, 5, 3), Image(4, 4, 1, 1.0)), DimensionError);
}

TEST(L1Loss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(4);
    Image a = random_image(rng, 6, 5, 3);
    const Image b = random_image(rng, 6, 5, 3);
    const Image m = random_image(rng, 6, 5, 1);
    const auto r = l1_loss(a, b, m);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        auto f = [&]() { return l1_loss(a, b, m).value; };
        EXPECT_TRUE(grad_close(r.grad.data[i], central_difference(a.data[i], f, 1e-7)));
    }
}

TEST(MaskLoss, EqualGivesZero) {
    std::mt19937_64 rng(5);
    const Image a = random_image(rng, 5, 5, 1);
    EXPECT_EQ(mask_loss(a, a).value, 0.0);
}

TEST(MaskLoss, FullAlphaHalfMask) {
    Image mask(8, 4, 1);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            mask.at(x, y) = 1.0;
        }
    }
    EXPECT_DOUBLE_EQ(mask_loss(Image(8, 4, 1, 1.0), mask).value, 0.5);
}

TEST(MaskLoss, MatchesDirectEvaluationAndGradient) {
    std::mt19937_64 rng(6);
    Image a = random_image(rng, 7, 3, 1);
    const Image m = random_image(rng, 7, 3, 1);
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        s += std::abs(a.data[i] - m.data[i]);
    }
    const auto r = mask_loss(a, m);
    EXPECT_NEAR(r.value, s / 21.0, 1e-15);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        auto f = [&]() { return mask_loss(a, m).value; };
        EXPECT_TRUE(grad_close(r.grad.data[i], central_difference(a.data[i], f, 1e-7)));
    }
}

TEST(Perceptual, EqualImagesGiveZero) {
    const Image a = pattern(32, 32, 0);
    EXPECT_NEAR(perceptual_loss(a, a).value, 0.0, 1e-14);
}

TEST(Perceptual, TooSmallForThreeScalesThrows) {
    const Image a(16, 16, 3);
    EXPECT_THROW(perceptual_loss(a, a), DimensionError);
    EXPECT_NO_THROW(perceptual_loss(Image(28, 28, 3), Image(28, 28, 3)));
}

TEST(Perceptual, SingleScaleAcceptsSixteenPixels) {
    std::mt19937_64 rng(7);
    Image a = random_image(rng, 16, 16, 3);
    const Image b = random_image(rng, 16, 16, 3);
    const MultiScaleSsim single(1, 7);
    const auto r = single.evaluate(a, b);
    for (std::size_t i = 0; i < a.data.size(); i += 7) {
        auto f = [&]() { return single.evaluate(a, b).value; };
        EXPECT_TRUE(grad_close(r.grad.data[i], central_difference(a.data[i], f)));
    }
}

TEST(Perceptual, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(8);
    Image a = random_image(rng, 32, 32, 3);
    const Image b = random_image(rng, 32, 32, 3);
    const auto r = perceptual_loss(a, b);
    for (std::size_t i = 0; i < a.data.size(); i += 13) {
        auto f = [&]() { return perceptual_loss(a, b).value; };
        EXPECT_TRUE(grad_close(r.grad.data[i], central_difference(a.data[i], f))) << i;
    }
}

TEST(Perceptual, ShiftCostsMoreThanNoiseAtMatchedL1) {
    const Image target = pattern(32, 32, 0);
    const Image shifted = pattern(32, 32, 4);
    const double l1 = l1_distance(shifted, target);
    Image noisy = target;
    std::mt19937_64 rng(9);
    std::bernoulli_distribution coin(0.5);
    for (double& v : noisy.data) {
        v += coin(rng) ? l1 : -l1;
    }
    ASSERT_NEAR(l1_distance(noisy, target), l1, 1e-12);
    const double shift_loss = perceptual_loss(shifted, target).value;
    const double noise_loss = perceptual_loss(noisy, target).value;
    EXPECT_GT(shift_loss, noise_loss);
    // Frozen regression values of the default implementation.
    EXPECT_NEAR(shift_loss, 0.82964121872630225, 1e-9);
    EXPECT_NEAR(noise_loss, 0.22621793860996212, 1e-9);
}

TEST(RigidLoss, RotationIsExactlyZero) {
    std::mt19937_64 rng(10);
    for (int i = 0; i < 200; ++i) {
        const Mat3 r = bags::testing::random_rotation(rng);
        const auto loss = rigid_loss(std::vector<Mat3>{r});
        EXPECT_EQ(loss.value, 0.0);
    }
    const auto exact = rigid_loss(std::vector<Mat3>{Mat3::Identity()});
    EXPECT_EQ(exact.value, 0.0);
}

TEST(RigidLoss, TwiceIdentityIsThree) {
    EXPECT_NEAR(rigid_loss(std::vector<Mat3>{2.0 * Mat3::Identity()}).value, 3.0, 1e-9);
}

TEST(RigidLoss, ReflectionMatchesBruteForce) {
    const Mat3 j = Vec3(1.0, 1.0, -1.0).asDiagonal();
    // Brute-force minimum of the elementwise L1 distance over a grid of rotations.
    double best = 1e300;
    const int steps = 72;
    const double pi = std::numbers::pi;
    for (int a = 0; a < steps; ++a) {
        for (int b = 0; b <= steps / 2; ++b) {
            for (int c = 0; c < steps; ++c) {
                const Mat3 r = (Eigen::AngleAxisd(2 * pi * a / steps, Vec3::UnitZ()) *
                                Eigen::AngleAxisd(pi * b / (steps / 2), Vec3::UnitY()) *
                                Eigen::AngleAxisd(2 * pi * c / steps, Vec3::UnitZ()))
                                   .toRotationMatrix();
                best = std::min(best, (j - r).cwiseAbs().sum());
            }
        }
    }
    EXPECT_NEAR(best, 2.0, 1e-9);
    EXPECT_NEAR(rigid_loss(std::vector<Mat3>{j}).value, 2.0, 1e-9);
}

TEST(RigidLoss, MeanOverMatrices) {
    const std::vector<Mat3> js{Mat3::Identity(), 2.0 * Mat3::Identity()};
    EXPECT_NEAR(rigid_loss(js).value, 1.5, 1e-9);
}

TEST(RigidLoss, PositiveOffRotations) {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 100; ++i) {
        const Mat3 j = bags::testing::random_matrix(rng);
        if (j.determinant() > 0.1) {
            EXPECT_GT(rigid_loss(std::vector<Mat3>{j}).value, 1e-9);
        }
    }
}

TEST(RigidLoss, NonFiniteThrows) {
    Mat3 j = Mat3::Identity();
    j(1, 2) = std::nan("");
    EXPECT_THROW(rigid_loss(std::vector<Mat3>{j}), NumericError);
}

TEST(RigidLoss, NearestRotationIsLeftEquivariant) {
    std::mt19937_64 rng(12);
    for (int i = 0; i < 100; ++i) {
        const Mat3 j = bags::testing::random_matrix(rng);
        const Mat3 q = bags::testing::random_rotation(rng);
        const Mat3 lhs = nearest_rotation(q * j);
        const Mat3 rhs = q * nearest_rotation(j);
        EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_NEAR((q * j - lhs).norm(), (j - nearest_rotation(j)).norm(), 1e-9);
    }
}

TEST(RigidLoss, ElementwiseNormIsNotRotationInvariant) {
    // The residual J - R* rotates with J, but its elementwise L1 norm does not.
    const Mat3 j = Vec3(2.0, 1.0, 1.0).asDiagonal();
    const Mat3 q = Eigen::AngleAxisd(std::numbers::pi / 4, Vec3::UnitZ()).toRotationMatrix();
    const double a = rigid_loss(std::vector<Mat3>{j}).value;
    const double b = rigid_loss(std::vector<Mat3>{q * j}).value;
    EXPECT_NEAR(a, 1.0, 1e-9);
    EXPECT_NEAR(b, std::sqrt(2.0), 1e-9);
}

TEST(RigidLoss, GradientMatchesFiniteDifferencesWithRotationHeld) {
    std::mt19937_64 rng(13);
    for (int i = 0; i < 20; ++i) {
        Mat3 j = bags::testing::random_matrix(rng);
        const Mat3 r = nearest_rotation(j);
        const auto loss = rigid_loss(std::vector<Mat3>{j});
        for (int k = 0; k < 9; ++k) {
            auto f = [&]() { return (j - r).cwiseAbs().sum(); };
            EXPECT_TRUE(grad_close(loss.grad[0](k / 3, k % 3), central_difference(j(k / 3, k % 3), f, 1e-7)));
        }
    }
}

TEST(TotalLoss, DefaultWeights) {
    const LossWeights w;
    EXPECT_EQ(w.sds, 1e-4);
    EXPECT_EQ(w.rigid, 1e-1);
    EXPECT_EQ(w.perceptual, 1e-1);
    EXPECT_EQ(w.l1, 1e-1);
    EXPECT_EQ(w.mask, 1.0);
}

namespace {

LossTerms random_terms(std::mt19937_64& rng) {
    LossTerms t;
    std::uniform_real_distribution<double> u(0.1, 2.0);
    t.sds = u(rng);
    t.sds_grad = random_image(rng, 4, 4, 3, -1, 1);
    t.rigid.value = u(rng);
    t.rigid.grad = {bags::testing::random_matrix(rng), bags::testing::random_matrix(rng)};
    t.perceptual = {u(rng), random_image(rng, 4, 4, 3, -1, 1)};
    t.l1 = {u(rng), random_image(rng, 4, 4, 3, -1, 1)};
    t.mask = {u(rng), random_image(rng, 4, 4, 1, -1, 1)};
    return t;
}

} // namespace

TEST(TotalLoss, AllZeroWeights) {
    std::mt19937_64 rng(14);
    const LossTerms t = random_terms(rng);
    const TotalLoss r = total_loss(t, LossWeights{0, 0, 0, 0, 0});
    EXPECT_EQ(r.value, 0.0);
    for (const Image* g : {&r.color_grad, &r.alpha_grad, &r.sds_grad}) {
        ASSERT_FALSE(g->data.empty());
        for (double v : g->data) {
            EXPECT_EQ(v, 0.0);
        }
    }
    for (const Mat3& g : r.jacobian_grad) {
        EXPECT_TRUE(g.isZero(0.0));
    }
}

TEST(TotalLoss, SingleWeightSelectsTerm) {
    std::mt19937_64 rng(15);
    const LossTerms t = random_terms(rng);
    EXPECT_DOUBLE_EQ(total_loss(t, LossWeights{0, 0, 0, 0.7, 0}).value, 0.7 * t.l1.value);
    EXPECT_DOUBLE_EQ(total_loss(t, LossWeights{0.7, 0, 0, 0, 0}).value, 0.7 * t.sds);
    EXPECT_DOUBLE_EQ(total_loss(t, LossWeights{0, 0.7, 0, 0, 0}).value, 0.7 * t.rigid.value);
    EXPECT_DOUBLE_EQ(total_loss(t, LossWeights{0, 0, 0.7, 0, 0}).value, 0.7 * t.perceptual.value);
    EXPECT_DOUBLE_EQ(total_loss(t, LossWeights{0, 0, 0, 0, 0.7}).value, 0.7 * t.mask.value);
}

TEST(TotalLoss, LinearInWeights) {
    std::mt19937_64 rng(16);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        const LossTerms t = random_terms(rng);
        const LossWeights a{u(rng), u(rng), u(rng), u(rng), u(rng)};
        const LossWeights b{u(rng), u(rng), u(rng), u(rng), u(rng)};
        const LossWeights s{a.sds + b.sds, a.rigid + b.rigid, a.perceptual + b.perceptual, a.l1 + b.l1,
                            a.mask + b.mask};
        const TotalLoss ra = total_loss(t, a);
        const TotalLoss rb = total_loss(t, b);
        const TotalLoss rs = total_loss(t, s);
        EXPECT_NEAR(rs.value, ra.value + rb.value, 1e-12);
        for (std::size_t i = 0; i < rs.color_grad.data.size(); ++i) {
            EXPECT_NEAR(rs.color_grad.data[i], ra.color_grad.data[i] + rb.color_grad.data[i], 1e-12);
        }
        for (std::size_t i = 0; i < rs.jacobian_grad.size(); ++i) {
            EXPECT_LT((rs.jacobian_grad[i] - ra.jacobian_grad[i] - rb.jacobian_grad[i]).cwiseAbs().maxCoeff(),
                      1e-12);
        }
    }
}

TEST(TotalLoss, NegativeWeightThrows) {
    EXPECT_THROW(total_loss(LossTerms{}, LossWeights{0, -1, 0, 0, 0}), ConfigError);
}
