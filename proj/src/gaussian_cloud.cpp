#include "bags/gaussian_cloud.hpp"

#include "bags/error.hpp"
#include "bags/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace bags {

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

Mat3 build_covariance(const Vec4& rotation, const Vec3& log_scale) {
    const Mat3 r = quat_to_rotation(rotation);
    const Mat3 x = r * log_scale.array().exp().matrix().asDiagonal();
    const Mat3 c = x * x.transpose();
    return 0.5 * (c + c.transpose());
}

CovarianceGrad build_covariance_backward(const Vec4& rotation, const Vec3& log_scale,
                                         const Mat3& grad_covariance) {
    const Mat3 r = quat_to_rotation(rotation);
    const Vec3 s = log_scale.array().exp();
    const Mat3 x = r * s.asDiagonal();
    const Mat3 grad_x = (grad_covariance + grad_covariance.transpose()) * x;
    const Mat3 grad_r = grad_x * s.asDiagonal();
    const Mat3 rt_gx = r.transpose() * grad_x;
    CovarianceGrad out;
    out.rotation = quat_to_rotation_backward(rotation, grad_r);
    out.log_scale = rt_gx.diagonal().cwiseProduct(s);
    return out;
}

GaussianCloud::GaussianCloud(std::size_t count)
    : positions({count, 3}), rotations({count, 4}), log_scales({count, 3}),
      opacity_logits({count, 1}), colors({count, 3}) {
    for (std::size_t i = 0; i < count; ++i) {
        rotations.at(i, 0) = 1.0;
    }
    resize_stats();
}

GaussianCloud GaussianCloud::from_gaussians(const std::vector<Gaussian>& gaussians) {
    GaussianCloud cloud(gaussians.size());
    for (std::size_t i = 0; i < gaussians.size(); ++i) {
        cloud.set(i, gaussians[i]);
    }
    return cloud;
}

Gaussian GaussianCloud::get(std::size_t i) const {
    Gaussian g;
    g.position = Vec3(positions.at(i, 0), positions.at(i, 1), positions.at(i, 2));
    g.rotation = Vec4(rotations.at(i, 0), rotations.at(i, 1), rotations.at(i, 2),
                      rotations.at(i, 3));
    g.log_scale = Vec3(log_scales.at(i, 0), log_scales.at(i, 1), log_scales.at(i, 2));
    g.opacity_logit = opacity_logits.at(i, 0);
    g.color = Vec3(colors.at(i, 0), colors.at(i, 1), colors.at(i, 2));
    return g;
}

void GaussianCloud::set(std::size_t i, const Gaussian& g) {
    for (int k = 0; k < 3; ++k) {
        positions.at(i, k) = g.position[k];
        log_scales.at(i, k) = g.log_scale[k];
        colors.at(i, k) = g.color[k];
    }
    for (int k = 0; k < 4; ++k) {
        rotations.at(i, k) = g.rotation[k];
    }
    opacity_logits.at(i, 0) = g.opacity_logit;
}

std::vector<DenseArray*> GaussianCloud::parameters() {
    return {&positions, &rotations, &log_scales, &opacity_logits, &colors};
}

std::vector<const DenseArray*> GaussianCloud::parameters() const {
    return {&positions, &rotations, &log_scales, &opacity_logits, &colors};
}

void GaussianCloud::zero_grad() {
    for (auto* p : parameters()) {
        p->zero_grad();
    }
}

void GaussianCloud::enforce_invariants(double max_scale) {
    const double max_log = std::log(max_scale);
    for (std::size_t i = 0; i < size(); ++i) {
        Vec4 q(rotations.at(i, 0), rotations.at(i, 1), rotations.at(i, 2), rotations.at(i, 3));
        const double n = q.norm();
        if (n < 1e-12) {
            q = Vec4(1.0, 0.0, 0.0, 0.0);
        } else {
            q /= n;
        }
        for (int k = 0; k < 4; ++k) {
            rotations.at(i, k) = q[k];
        }
        for (int k = 0; k < 3; ++k) {
            log_scales.at(i, k) = std::min(log_scales.at(i, k), max_log);
            colors.at(i, k) = std::clamp(colors.at(i, k), 0.0, 1.0);
        }
    }
}

void GaussianCloud::resize_stats() {
    view_grad_accum_.assign(size(), 0.0);
    view_grad_count_.assign(size(), 0);
    position_grad_accum_.assign(size(), Vec3::Zero());
}

void GaussianCloud::reset_densify_stats() { resize_stats(); }

void GaussianCloud::restore_densify_stats(std::vector<double> accum, std::vector<std::uint32_t> count,
                                          std::vector<Vec3> position_accum) {
    if (accum.size() != size() || count.size() != size() || position_accum.size() != size()) {
        throw DimensionError("restore_densify_stats: length differs from cloud size");
    }
    view_grad_accum_ = std::move(accum);
    view_grad_count_ = std::move(count);
    position_grad_accum_ = std::move(position_accum);
}

void GaussianCloud::accumulate_densify_stats(std::span<const double> view_grad_norm,
                                             std::span<const Vec3> position_grad,
                                             std::span<const std::uint8_t> visible) {
    if (view_grad_accum_.size() != size()) {
        resize_stats();
    }
    if (view_grad_norm.size() != size() || position_grad.size() != size() ||
        visible.size() != size()) {
        throw DimensionError("accumulate_densify_stats: length differs from cloud size");
    }
    for (std::size_t i = 0; i < size(); ++i) {
        if (visible[i] != 0) {
            view_grad_accum_[i] += view_grad_norm[i];
            view_grad_count_[i] += 1;
            position_grad_accum_[i] += position_grad[i];
        }
    }
}

Vec3 GaussianCloud::centroid() const {
    Vec3 c = Vec3::Zero();
    for (std::size_t i = 0; i < size(); ++i) {
        c += Vec3(positions.at(i, 0), positions.at(i, 1), positions.at(i, 2));
    }
    return size() > 0 ? Vec3(c / static_cast<double>(size())) : c;
}

DensifyReport densify_and_prune(GaussianCloud& cloud, const DensifyConfig& config,
                                std::mt19937_64& rng) {
    const std::size_t n = cloud.size();
    if (cloud.view_grad_accum().size() != n) {
        cloud.reset_densify_stats();
    }
    const auto& accum = cloud.view_grad_accum();
    const auto& count = cloud.view_grad_count();
    const auto& pos_grad = cloud.position_grad_accum();
    const double split_size = config.split_scale_fraction * config.scene_extent;
    const double shrink = std::log(config.split_shrink);

    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Gaussian> out;
    DensifyReport report;
    out.reserve(2 * n);
    report.source.reserve(2 * n);
    auto emit = [&](const Gaussian& g, std::ptrdiff_t src) {
        if (g.opacity() < config.prune_opacity) {
            ++report.pruned;
            return;
        }
        out.push_back(g);
        report.source.push_back(src);
    };

    for (std::size_t i = 0; i < n; ++i) {
        const Gaussian g = cloud.get(i);
        const double mean_grad = count[i] > 0 ? accum[i] / count[i] : 0.0;
        const bool high_grad = mean_grad > config.grad_threshold;
        const double max_scale = g.scale().maxCoeff();
        if (high_grad && max_scale > split_size) {
            const Mat3 r = quat_to_rotation(g.rotation);
            const Vec3 s = g.scale();
            for (int child = 0; child < 2; ++child) {
                Gaussian c = g;
                const Vec3 z(normal(rng), normal(rng), normal(rng));
                c.position = g.position + r * s.cwiseProduct(z);
                c.log_scale = g.log_scale.array() - shrink;
                emit(c, -1);
            }
            ++report.split;
        } else {
            emit(g, static_cast<std::ptrdiff_t>(i));
            if (high_grad) {
                Gaussian c = g;
                const Vec3 dir = pos_grad[i];
                if (dir.norm() > 0.0) {
                    c.position = g.position - max_scale * dir.normalized();
                }
                emit(c, -1);
                ++report.cloned;
            }
        }
    }
    if (out.empty()) {
        throw NumericError("densify_and_prune: every Gaussian was pruned");
    }
    for (const auto& g : out) {
        if (!g.position.allFinite() || !g.log_scale.allFinite() || !g.rotation.allFinite()) {
            throw NumericError("densify_and_prune: produced non-finite parameters");
        }
    }
    cloud = GaussianCloud::from_gaussians(out);
    return report;
}

GaussianCloud init_from_mask(const Image& image, const Image& mask, const Camera& camera,
                             const MaskInitConfig& config) {
    if (mask.channels != 1 || image.width != mask.width || image.height != mask.height) {
        throw DimensionError("init_from_mask: mask does not match image");
    }
    std::vector<std::array<int, 2>> foreground;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(x, y) > 0.5) {
                foreground.push_back({x, y});
            }
        }
    }
    if (foreground.empty()) {
        throw ConfigError("init_from_mask: mask is empty");
    }
    if (config.count == 0) {
        throw ConfigError("init_from_mask: count must be positive");
    }

    std::mt19937_64 rng(config.seed);
    std::uniform_int_distribution<std::size_t> pick(0, foreground.size() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto& k = camera.intrinsics;
    const Vec3 center_cam = camera.world_to_camera.apply(config.scene_center);
    const double spread = config.depth_spread * config.scene_extent;
    const double near = std::max(0.05 * center_cam.z(), 1e-3);
    const RigidTransform cam_to_world = camera.world_to_camera.inverse();

    std::vector<Gaussian> gaussians(config.count);
    for (auto& g : gaussians) {
        const auto [px, py] = foreground[pick(rng)];
        const double u = px + unit(rng);
        const double v = py + unit(rng);
        const double depth = std::max(near, center_cam.z() + spread * (2.0 * unit(rng) - 1.0));
        const Vec3 p_cam((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
        g.position = cam_to_world.apply(p_cam);
        g.rotation = Vec4(1.0, 0.0, 0.0, 0.0);
        g.opacity_logit = logit(config.initial_opacity);
        for (int c = 0; c < 3; ++c) {
            g.color[c] = image.channels >= 3 ? image.at(px, py, c) : image.at(px, py, 0);
        }
    }

    // Mean distance to the three nearest neighbors (brute force).
    const std::size_t n = gaussians.size();
    std::vector<double> nn_scale(n, 0.01 * config.scene_extent);
    parallel_for(n, 64, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            std::array<double, 3> best{std::numeric_limits<double>::infinity(),
                                       std::numeric_limits<double>::infinity(),
                                       std::numeric_limits<double>::infinity()};
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) {
                    continue;
                }
                const double d2 = (gaussians[i].position - gaussians[j].position).squaredNorm();
                if (d2 < best[2]) {
                    best[2] = d2;
                    std::sort(best.begin(), best.end());
                }
            }
            double sum = 0.0;
            int used = 0;
            for (double d2 : best) {
                if (std::isfinite(d2)) {
                    sum += std::sqrt(d2);
                    ++used;
                }
            }
            if (used > 0) {
                nn_scale[i] = sum / used;
            }
        }
    });
    const double min_scale = 1e-4 * config.scene_extent;
    for (std::size_t i = 0; i < n; ++i) {
        const double s = std::clamp(nn_scale[i], min_scale, config.scene_extent);
        gaussians[i].log_scale = Vec3::Constant(std::log(s));
    }
    return GaussianCloud::from_gaussians(gaussians);
}

} // namespace bags
