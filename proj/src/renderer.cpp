#include "bags/renderer.hpp"

#include "bags/error.hpp"
#include "bags/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace bags {

RasterConfig RasterConfig::exact() {
    RasterConfig c;
    c.alpha_min = 0.0;
    c.transmittance_min = 0.0;
    c.cutoff_sigma = std::numeric_limits<double>::infinity();
    return c;
}

void SplatSet::resize(std::size_t n) {
    means.resize(n, Vec3::Zero());
    covariances.resize(n, Mat3::Identity());
    opacities.resize(n, 0.0);
    colors.resize(n, Vec3::Zero());
}

SplatSet SplatSet::from_cloud(const GaussianCloud& cloud) {
    SplatSet s;
    s.resize(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Gaussian g = cloud.get(i);
        s.means[i] = g.position;
        s.covariances[i] = build_covariance(g);
        s.opacities[i] = g.opacity();
        s.colors[i] = g.color;
    }
    return s;
}

void SplatGrads::resize(std::size_t n) {
    means.assign(n, Vec3::Zero());
    covariances.assign(n, Mat3::Zero());
    opacities.assign(n, 0.0);
    colors.assign(n, Vec3::Zero());
    view_grad_norm.assign(n, 0.0);
    visible.assign(n, 0);
}

namespace {

// Pixel-range of the cutoff box along one axis, clamped to [0, size - 1].
bool axis_range(double center, double extent, int size, int& lo, int& hi) {
    if (!std::isfinite(extent)) {
        lo = 0;
        hi = size - 1;
        return true;
    }
    const double a = std::ceil(center - extent - 0.5);
    const double b = std::floor(center + extent - 0.5);
    if (b < 0.0 || a > size - 1.0 || b < a) {
        return false;
    }
    lo = static_cast<int>(std::max(a, 0.0));
    hi = static_cast<int>(std::min(b, size - 1.0));
    return true;
}

struct PackedSplat {
    double mx, my;
    double a, b, c;
    double opacity;
    double r, g, bl;
    double power_floor; // below this exponent alpha is under alpha_min
};

PackedSplat pack(const ProjectedSplat& s, double alpha_min) {
    const double floor = s.opacity > 0.0 && alpha_min > 0.0
                             ? std::log(alpha_min / s.opacity) - 1e-9
                             : -std::numeric_limits<double>::infinity();
    return {s.mean.x(), s.mean.y(), s.conic.x(), s.conic.y(), s.conic.z(), s.opacity,
            s.color.x(), s.color.y(), s.color.z(), floor};
}

struct Contribution {
    std::uint32_t slot; // position in the entry list being walked
    double alpha;
    double gauss;
    double transmittance; // before this splat
    bool clamped;
};

// Front-to-back blend of one pixel over `order` (indices into `packed`). Calls
// `visit(slot, contribution)` for every accepted splat; returns final transmittance.
template <typename Visit>
double blend_pixel(double px, double py, const std::uint32_t* order, std::size_t count,
                   const std::vector<PackedSplat>& packed, const RasterConfig& cfg, bool early_stop,
                   Visit&& visit) {
    double t = 1.0;
    for (std::size_t k = 0; k < count; ++k) {
        const PackedSplat& s = packed[order[k]];
        const double dx = px - s.mx;
        const double dy = py - s.my;
        const double power = -0.5 * (s.a * dx * dx + s.c * dy * dy) - s.b * dx * dy;
        if (power > 0.0 || power < s.power_floor) {
            continue;
        }
        const double gauss = std::exp(power);
        double alpha = s.opacity * gauss;
        if (alpha < cfg.alpha_min || alpha <= 0.0) {
            continue;
        }
        bool clamped = false;
        if (alpha > cfg.alpha_max) {
            alpha = cfg.alpha_max;
            clamped = true;
        }
        const double next_t = t * (1.0 - alpha);
        if (early_stop && next_t < cfg.transmittance_min) {
            break;
        }
        visit(static_cast<std::uint32_t>(k), Contribution{order[k], alpha, gauss, t, clamped});
        t = next_t;
    }
    return t;
}

std::shared_ptr<RasterState> prepare(const SplatSet& splats, const Camera& camera,
                                     const Vec3& background, const RasterConfig& config,
                                     bool tiled) {
    camera.validate();
    if (config.tile_size <= 0) {
        throw ConfigError("tile size must be positive");
    }
    const std::size_t n = splats.size();
    if (splats.covariances.size() != n || splats.opacities.size() != n ||
        splats.colors.size() != n) {
        throw DimensionError("SplatSet arrays have inconsistent lengths");
    }
    auto state = std::make_shared<RasterState>();
    state->camera = camera;
    state->config = config;
    state->background = background;
    state->source_count = n;
    state->tiled = tiled;

    RasterConfig projection_config = config;
    if (!tiled) {
        projection_config.cutoff_sigma = std::numeric_limits<double>::infinity();
    }
    std::vector<std::optional<ProjectedSplat>> projected(n);
    parallel_for(n, 256, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            projected[i] = project(splats.means[i], splats.covariances[i], splats.opacities[i],
                                   splats.colors[i], camera, projection_config);
            if (projected[i]) {
                projected[i]->index = static_cast<std::uint32_t>(i);
            }
        }
    });
    for (auto& p : projected) {
        if (p) {
            state->splats.push_back(std::move(*p));
        }
    }
    std::sort(state->splats.begin(), state->splats.end(),
              [](const ProjectedSplat& a, const ProjectedSplat& b) {
                  if (a.depth != b.depth) {
                      return a.depth < b.depth;
                  }
                  return a.index < b.index;
              });

    const int w = camera.intrinsics.width;
    const int h = camera.intrinsics.height;
    const int ts = tiled ? config.tile_size : std::max(w, h);
    state->tiles_x = (w + ts - 1) / ts;
    state->tiles_y = (h + ts - 1) / ts;
    const std::size_t tiles = static_cast<std::size_t>(state->tiles_x) * state->tiles_y;
    std::vector<std::uint32_t> counts(tiles + 1, 0);
    auto for_each_tile = [&](const ProjectedSplat& s, auto&& fn) {
        for (int ty = s.tile_min[1]; ty <= s.tile_max[1]; ++ty) {
            for (int tx = s.tile_min[0]; tx <= s.tile_max[0]; ++tx) {
                fn(static_cast<std::size_t>(ty) * state->tiles_x + tx);
            }
        }
    };
    for (auto& s : state->splats) {
        if (!tiled) {
            s.tile_min[0] = s.tile_min[1] = 0;
            s.tile_max[0] = state->tiles_x - 1;
            s.tile_max[1] = state->tiles_y - 1;
        }
        for_each_tile(s, [&](std::size_t t) { ++counts[t + 1]; });
    }
    std::partial_sum(counts.begin(), counts.end(), counts.begin());
    state->tile_offsets = counts;
    state->tile_entries.resize(counts.back());
    std::vector<std::uint32_t> cursor(counts.begin(), counts.end() - 1);
    for (std::uint32_t i = 0; i < state->splats.size(); ++i) {
        for_each_tile(state->splats[i], [&](std::size_t t) { state->tile_entries[cursor[t]++] = i; });
    }
    return state;
}

struct TileRect {
    int x0, y0, x1, y1; // exclusive upper bounds
};

TileRect tile_rect(const RasterState& st, std::size_t tile) {
    const int w = st.camera.intrinsics.width;
    const int h = st.camera.intrinsics.height;
    const int ts = st.tiled ? st.config.tile_size : std::max(w, h);
    const int tx = static_cast<int>(tile % st.tiles_x);
    const int ty = static_cast<int>(tile / st.tiles_x);
    return {tx * ts, ty * ts, std::min(w, (tx + 1) * ts), std::min(h, (ty + 1) * ts)};
}

RenderOutput rasterize(std::shared_ptr<RasterState> state) {
    const auto& st = *state;
    const int w = st.camera.intrinsics.width;
    const int h = st.camera.intrinsics.height;
    RenderOutput out;
    out.color = Image(w, h, 3);
    out.alpha = Image(w, h, 1);
    std::vector<PackedSplat> packed(st.splats.size());
    std::transform(st.splats.begin(), st.splats.end(), packed.begin(),
                   [&](const ProjectedSplat& s) { return pack(s, st.config.alpha_min); });
    const std::size_t tiles = static_cast<std::size_t>(st.tiles_x) * st.tiles_y;
    const bool early_stop = st.tiled;

    parallel_for(tiles, 1, [&](std::size_t begin, std::size_t end) {
        for (std::size_t tile = begin; tile < end; ++tile) {
            const TileRect r = tile_rect(st, tile);
            const std::uint32_t* order = st.tile_entries.data() + st.tile_offsets[tile];
            const std::size_t count = st.tile_offsets[tile + 1] - st.tile_offsets[tile];
            for (int y = r.y0; y < r.y1; ++y) {
                for (int x = r.x0; x < r.x1; ++x) {
                    Vec3 c = Vec3::Zero();
                    const double t = blend_pixel(
                        x + 0.5, y + 0.5, order, count, packed, st.config, early_stop,
                        [&](std::uint32_t, const Contribution& k) {
                            const PackedSplat& s = packed[k.slot];
                            const double wgt = k.alpha * k.transmittance;
                            c += wgt * Vec3(s.r, s.g, s.bl);
                        });
                    for (int ch = 0; ch < 3; ++ch) {
                        out.color.at(x, y, ch) = c[ch] + t * st.background[ch];
                    }
                    out.alpha.at(x, y) = 1.0 - t;
                }
            }
        }
    });
    out.state = std::move(state);
    return out;
}

} // namespace

std::optional<ProjectedSplat> project(const Vec3& mean, const Mat3& covariance, double opacity,
                                      const Vec3& color, const Camera& camera,
                                      const RasterConfig& config) {
    const auto& k = camera.intrinsics;
    const Mat3& rot = camera.world_to_camera.rotation;
    const Vec3 pc = camera.world_to_camera.apply(mean);
    if (!(pc.z() > config.near_plane)) {
        return std::nullopt;
    }
    const double z = pc.z();
    const double iz = 1.0 / z;
    Eigen::Matrix<double, 2, 3> jac;
    jac << k.fx * iz, 0.0, -k.fx * pc.x() * iz * iz, //
        0.0, k.fy * iz, -k.fy * pc.y() * iz * iz;
    const Mat3 cam_cov = rot * covariance * rot.transpose();
    Mat2 cov2 = jac * cam_cov * jac.transpose();
    cov2(0, 0) += config.lowpass;
    cov2(1, 1) += config.lowpass;
    cov2(0, 1) = cov2(1, 0) = 0.5 * (cov2(0, 1) + cov2(1, 0));
    const double det = cov2(0, 0) * cov2(1, 1) - cov2(0, 1) * cov2(0, 1);
    if (!(det > 0.0) || !std::isfinite(det)) {
        return std::nullopt;
    }
    ProjectedSplat s;
    s.mean = Vec2(k.fx * pc.x() * iz + k.cx, k.fy * pc.y() * iz + k.cy);
    s.cov = cov2;
    s.conic = Vec3(cov2(1, 1) / det, -cov2(0, 1) / det, cov2(0, 0) / det);
    s.depth = z;
    s.opacity = opacity;
    s.color = color;
    s.camera_mean = pc;
    s.camera_cov = cam_cov;

    const double ex = config.cutoff_sigma * std::sqrt(cov2(0, 0));
    const double ey = config.cutoff_sigma * std::sqrt(cov2(1, 1));
    int x0 = 0;
    int x1 = 0;
    int y0 = 0;
    int y1 = 0;
    if (!axis_range(s.mean.x(), ex, k.width, x0, x1) ||
        !axis_range(s.mean.y(), ey, k.height, y0, y1)) {
        return std::nullopt;
    }
    const int ts = config.tile_size;
    s.tile_min[0] = x0 / ts;
    s.tile_min[1] = y0 / ts;
    s.tile_max[0] = x1 / ts;
    s.tile_max[1] = y1 / ts;
    return s;
}

RenderOutput render_forward(const SplatSet& splats, const Camera& camera, const Vec3& background,
                            const RasterConfig& config) {
    return rasterize(prepare(splats, camera, background, config, true));
}

RenderOutput render_reference(const SplatSet& splats, const Camera& camera,
                              const Vec3& background, const RasterConfig& config) {
    return rasterize(prepare(splats, camera, background, config, false));
}

SplatGrads render_backward(const RenderOutput& forward, const Image* grad_color,
                           const Image* grad_alpha) {
    if (!forward.state) {
        throw StateError("render_backward called without a forward pass");
    }
    const RasterState& st = *forward.state;
    const int w = st.camera.intrinsics.width;
    const int h = st.camera.intrinsics.height;
    if (grad_color && (grad_color->width != w || grad_color->height != h ||
                       grad_color->channels != 3)) {
        throw DimensionError("render_backward: color gradient has the wrong shape");
    }
    if (grad_alpha && (grad_alpha->width != w || grad_alpha->height != h ||
                       grad_alpha->channels != 1)) {
        throw DimensionError("render_backward: alpha gradient has the wrong shape");
    }

    std::vector<PackedSplat> packed(st.splats.size());
    std::transform(st.splats.begin(), st.splats.end(), packed.begin(),
                   [&](const ProjectedSplat& s) { return pack(s, st.config.alpha_min); });

    // One 9-wide gradient slot per (tile, splat) entry; merged in entry order afterwards so
    // the result does not depend on the thread count.
    constexpr std::size_t kSlot = 9;
    std::vector<double> slots(st.tile_entries.size() * kSlot, 0.0);
    const std::size_t tiles = static_cast<std::size_t>(st.tiles_x) * st.tiles_y;
    const bool early_stop = st.tiled;
    const Vec3 bg = st.background;

    parallel_for(tiles, 1, [&](std::size_t begin, std::size_t end) {
        std::vector<Contribution> contrib;
        std::vector<std::uint32_t> contrib_pos;
        for (std::size_t tile = begin; tile < end; ++tile) {
            const TileRect r = tile_rect(st, tile);
            const std::size_t base = st.tile_offsets[tile];
            const std::uint32_t* order = st.tile_entries.data() + base;
            const std::size_t count = st.tile_offsets[tile + 1] - base;
            for (int y = r.y0; y < r.y1; ++y) {
                for (int x = r.x0; x < r.x1; ++x) {
                    Vec3 dc = Vec3::Zero();
                    if (grad_color) {
                        dc = Vec3(grad_color->at(x, y, 0), grad_color->at(x, y, 1),
                                  grad_color->at(x, y, 2));
                    }
                    const double da = grad_alpha ? grad_alpha->at(x, y) : 0.0;
                    if (dc.isZero(0.0) && da == 0.0) {
                        continue;
                    }
                    contrib.clear();
                    contrib_pos.clear();
                    const double px = x + 0.5;
                    const double py = y + 0.5;
                    blend_pixel(px, py, order, count, packed, st.config, early_stop,
                                [&](std::uint32_t pos, const Contribution& k) {
                                    contrib.push_back(k);
                                    contrib_pos.push_back(pos);
                                });
                    Vec3 acc_color = bg;
                    double acc_alpha = 0.0;
                    for (std::size_t j = contrib.size(); j-- > 0;) {
                        const Contribution& k = contrib[j];
                        const PackedSplat& s = packed[k.slot];
                        const Vec3 c(s.r, s.g, s.bl);
                        const double d_alpha =
                            k.transmittance * (dc.dot(c - acc_color) + da * (1.0 - acc_alpha));
                        double* g = &slots[(base + contrib_pos[j]) * kSlot];
                        const double wgt = k.alpha * k.transmittance;
                        g[6] += wgt * dc.x();
                        g[7] += wgt * dc.y();
                        g[8] += wgt * dc.z();
                        acc_color = k.alpha * c + (1.0 - k.alpha) * acc_color;
                        acc_alpha = k.alpha + (1.0 - k.alpha) * acc_alpha;
                        if (k.clamped) {
                            continue;
                        }
                        g[5] += k.gauss * d_alpha;
                        const double d_power = s.opacity * d_alpha * k.gauss;
                        const double dx = px - s.mx;
                        const double dy = py - s.my;
                        // power = -(a dx^2 + c dy^2)/2 - b dx dy, with d = p - mean
                        g[0] += d_power * (s.a * dx + s.b * dy);
                        g[1] += d_power * (s.b * dx + s.c * dy);
                        g[2] += d_power * (-0.5 * dx * dx);
                        g[3] += d_power * (-dx * dy);
                        g[4] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
        }
    });

    std::vector<double> per_splat(st.splats.size() * kSlot, 0.0);
    for (std::size_t e = 0; e < st.tile_entries.size(); ++e) {
        double* dst = &per_splat[st.tile_entries[e] * kSlot];
        const double* src = &slots[e * kSlot];
        for (std::size_t k = 0; k < kSlot; ++k) {
            dst[k] += src[k];
        }
    }

    SplatGrads out;
    out.resize(st.source_count);
    const auto& intr = st.camera.intrinsics;
    const Mat3& rot = st.camera.world_to_camera.rotation;
    parallel_for(st.splats.size(), 256, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const ProjectedSplat& s = st.splats[i];
            const double* g = &per_splat[i * kSlot];
            const std::size_t src = s.index;
            out.visible[src] = 1;
            out.colors[src] = Vec3(g[6], g[7], g[8]);
            out.opacities[src] = g[5];

            const Vec2 g_mean2(g[0], g[1]);
            Mat2 g_conic;
            g_conic << g[2], 0.5 * g[3], 0.5 * g[3], g[4];
            const Mat2 q = (Mat2() << s.conic.x(), s.conic.y(), s.conic.y(), s.conic.z()).finished();
            const Mat2 g_cov2 = -q * g_conic * q;

            const Vec3& pc = s.camera_mean;
            const double iz = 1.0 / pc.z();
            Eigen::Matrix<double, 2, 3> jac;
            jac << intr.fx * iz, 0.0, -intr.fx * pc.x() * iz * iz, //
                0.0, intr.fy * iz, -intr.fy * pc.y() * iz * iz;
            const Mat3 g_cam_cov = jac.transpose() * g_cov2 * jac;
            const Eigen::Matrix<double, 2, 3> g_jac = 2.0 * g_cov2 * jac * s.camera_cov;

            Vec3 g_pc;
            g_pc.x() = g_mean2.x() * intr.fx * iz;
            g_pc.y() = g_mean2.y() * intr.fy * iz;
            g_pc.z() = -g_mean2.x() * intr.fx * pc.x() * iz * iz -
                       g_mean2.y() * intr.fy * pc.y() * iz * iz;
            const double iz2 = iz * iz;
            const double iz3 = iz2 * iz;
            g_pc.x() += g_jac(0, 2) * (-intr.fx * iz2);
            g_pc.y() += g_jac(1, 2) * (-intr.fy * iz2);
            g_pc.z() += g_jac(0, 0) * (-intr.fx * iz2) + g_jac(0, 2) * (2.0 * intr.fx * pc.x() * iz3) +
                        g_jac(1, 1) * (-intr.fy * iz2) + g_jac(1, 2) * (2.0 * intr.fy * pc.y() * iz3);

            out.means[src] = rot.transpose() * g_pc;
            out.covariances[src] = rot.transpose() * g_cam_cov * rot;
            out.view_grad_norm[src] =
                Vec2(g_mean2.x() * 0.5 * intr.width, g_mean2.y() * 0.5 * intr.height).norm();
        }
    });
    return out;
}

RenderGrads cloud_grads(const GaussianCloud& cloud, const SplatGrads& grads) {
    const std::size_t n = cloud.size();
    if (grads.size() != n) {
        throw DimensionError("cloud_grads: gradient count differs from cloud size");
    }
    RenderGrads out;
    out.position.resize(n);
    out.rotation.resize(n);
    out.log_scale.resize(n);
    out.opacity_logit.resize(n);
    out.color.resize(n);
    out.view_grad_norm = grads.view_grad_norm;
    parallel_for(n, 256, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const Gaussian g = cloud.get(i);
            const auto cg = build_covariance_backward(g.rotation, g.log_scale, grads.covariances[i]);
            const double o = g.opacity();
            out.position[i] = grads.means[i];
            out.rotation[i] = cg.rotation;
            out.log_scale[i] = cg.log_scale;
            out.opacity_logit[i] = grads.opacities[i] * o * (1.0 - o);
            out.color[i] = grads.colors[i];
        }
    });
    return out;
}

void accumulate_into(GaussianCloud& cloud, const RenderGrads& grads) {
    auto gp = cloud.positions.grad();
    auto gr = cloud.rotations.grad();
    auto gs = cloud.log_scales.grad();
    auto go = cloud.opacity_logits.grad();
    auto gc = cloud.colors.grad();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            gp[i * 3 + k] += grads.position[i][k];
            gs[i * 3 + k] += grads.log_scale[i][k];
            gc[i * 3 + k] += grads.color[i][k];
        }
        for (int k = 0; k < 4; ++k) {
            gr[i * 4 + k] += grads.rotation[i][k];
        }
        go[i] += grads.opacity_logit[i];
    }
}

} // namespace bags
