#include "bags/losses.hpp"

#include "bags/error.hpp"
#include "bags/svd3.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bags {

void LossWeights::validate() const {
    for (double w : {sds, rigid, perceptual, l1, mask}) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw ConfigError("loss weights must be finite and non-negative");
        }
    }
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void require_same(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": image shapes differ");
    }
}

void require_mask(const Image& image, const Image& mask, const char* what) {
    if (mask.channels != 1 || mask.width != image.width || mask.height != image.height) {
        throw DimensionError(std::string(what) + ": mask does not match image");
    }
}

} // namespace

ImageLoss l1_loss(const Image& render, const Image& target, const Image& mask) {
    require_same(render, target, "l1_loss");
    require_mask(render, mask, "l1_loss");
    double mask_sum = 0.0;
    for (double m : mask.data) {
        mask_sum += m;
    }
    if (!(mask_sum > 0.0)) {
        throw ConfigError("l1_loss: mask is empty");
    }
    const double norm = 1.0 / (mask_sum * render.channels);
    ImageLoss out;
    out.grad = Image(render.width, render.height, render.channels);
    const std::size_t c = static_cast<std::size_t>(render.channels);
    for (std::size_t p = 0; p < mask.data.size(); ++p) {
        const double m = mask.data[p];
        if (m == 0.0) {
            continue;
        }
        for (std::size_t k = 0; k < c; ++k) {
            const double d = render.data[p * c + k] - target.data[p * c + k];
            out.value += m * std::abs(d);
            out.grad.data[p * c + k] = m * sign(d) * norm;
        }
    }
    out.value *= norm;
    return out;
}

ImageLoss mask_loss(const Image& alpha, const Image& mask) {
    require_same(alpha, mask, "mask_loss");
    if (alpha.channels != 1) {
        throw DimensionError("mask_loss: expected single-channel images");
    }
    ImageLoss out;
    out.grad = Image(alpha.width, alpha.height, 1);
    const double norm = 1.0 / static_cast<double>(alpha.data.size());
    for (std::size_t p = 0; p < alpha.data.size(); ++p) {
        const double d = alpha.data[p] - mask.data[p];
        out.value += std::abs(d);
        out.grad.data[p] = sign(d) * norm;
    }
    out.value *= norm;
    return out;
}

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

// One channel plane, row-major.
struct Plane {
    int w = 0;
    int h = 0;
    std::vector<double> v;
    double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
    double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

Plane channel_plane(const Image& img, int c) {
    Plane p{img.width, img.height, std::vector<double>(img.pixel_count())};
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            p.at(x, y) = img.at(x, y, c);
        }
    }
    return p;
}

Plane pool2(const Plane& p) {
    Plane out{p.w / 2, p.h / 2, {}};
    out.v.resize(static_cast<std::size_t>(out.w) * out.h);
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            out.at(x, y) = 0.25 * (p.at(2 * x, 2 * y) + p.at(2 * x + 1, 2 * y) +
                                   p.at(2 * x, 2 * y + 1) + p.at(2 * x + 1, 2 * y + 1));
        }
    }
    return out;
}

void pool2_backward(const Plane& g_small, Plane& g_big) {
    for (int y = 0; y < g_small.h; ++y) {
        for (int x = 0; x < g_small.w; ++x) {
            const double g = 0.25 * g_small.at(x, y);
            g_big.at(2 * x, 2 * y) += g;
            g_big.at(2 * x + 1, 2 * y) += g;
            g_big.at(2 * x, 2 * y + 1) += g;
            g_big.at(2 * x + 1, 2 * y + 1) += g;
        }
    }
}

// Means over every fully contained win x win window; result is (w-win+1) x (h-win+1).
Plane box_mean(const Plane& p, int win) {
    const int ow = p.w - win + 1;
    const int oh = p.h - win + 1;
    std::vector<double> integral(static_cast<std::size_t>(p.w + 1) * (p.h + 1), 0.0);
    auto I = [&](int x, int y) -> double& { return integral[static_cast<std::size_t>(y) * (p.w + 1) + x]; };
    for (int y = 0; y < p.h; ++y) {
        for (int x = 0; x < p.w; ++x) {
            I(x + 1, y + 1) = p.at(x, y) + I(x, y + 1) + I(x + 1, y) - I(x, y);
        }
    }
    Plane out{ow, oh, std::vector<double>(static_cast<std::size_t>(ow) * oh)};
    const double inv = 1.0 / (win * win);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            out.at(x, y) = (I(x + win, y + win) - I(x, y + win) - I(x + win, y) + I(x, y)) * inv;
        }
    }
    return out;
}

// Adjoint of box_mean: spreads each window value back over its pixels.
Plane box_mean_adjoint(const Plane& g, int win, int w, int h) {
    // Prefix sums over window origins, queried per pixel.
    std::vector<double> integral(static_cast<std::size_t>(g.w + 1) * (g.h + 1), 0.0);
    auto I = [&](int x, int y) -> double& { return integral[static_cast<std::size_t>(y) * (g.w + 1) + x]; };
    for (int y = 0; y < g.h; ++y) {
        for (int x = 0; x < g.w; ++x) {
            I(x + 1, y + 1) = g.at(x, y) + I(x, y + 1) + I(x + 1, y) - I(x, y);
        }
    }
    Plane out{w, h, std::vector<double>(static_cast<std::size_t>(w) * h)};
    const double inv = 1.0 / (win * win);
    for (int y = 0; y < h; ++y) {
        const int y0 = std::max(0, y - win + 1);
        const int y1 = std::min(g.h - 1, y);
        for (int x = 0; x < w; ++x) {
            const int x0 = std::max(0, x - win + 1);
            const int x1 = std::min(g.w - 1, x);
            if (x1 < x0 || y1 < y0) {
                continue;
            }
            out.at(x, y) = (I(x1 + 1, y1 + 1) - I(x0, y1 + 1) - I(x1 + 1, y0) + I(x0, y0)) * inv;
        }
    }
    return out;
}

Plane multiply(const Plane& a, const Plane& b) {
    Plane out = a;
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        out.v[i] *= b.v[i];
    }
    return out;
}

// Mean SSIM of one plane pair and its gradient with respect to x, scaled by `scale`.
double ssim_plane(const Plane& x, const Plane& y, int win, double scale, Plane& grad_x) {
    const Plane mx = box_mean(x, win);
    const Plane my = box_mean(y, win);
    const Plane exx = box_mean(multiply(x, x), win);
    const Plane eyy = box_mean(multiply(y, y), win);
    const Plane exy = box_mean(multiply(x, y), win);
    const std::size_t n = mx.v.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    Plane g_mu{mx.w, mx.h, std::vector<double>(n)};
    Plane g_xx = g_mu;
    Plane g_xy = g_mu;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double ux = mx.v[i];
        const double uy = my.v[i];
        const double vx = exx.v[i] - ux * ux;
        const double vy = eyy.v[i] - uy * uy;
        const double cxy = exy.v[i] - ux * uy;
        const double a = 2.0 * ux * uy + kC1;
        const double b = 2.0 * cxy + kC2;
        const double c = ux * ux + uy * uy + kC1;
        const double d = vx + vy + kC2;
        const double s = (a * b) / (c * d);
        total += s;
        const double ds_dux = 2.0 * uy * b / (c * d) - s * 2.0 * ux / c;
        const double ds_dvx = -s / d;
        const double ds_dcxy = 2.0 * a / (c * d);
        const double k = scale * inv_n;
        g_mu.v[i] = k * (ds_dux - 2.0 * ux * ds_dvx - uy * ds_dcxy);
        g_xx.v[i] = k * ds_dvx;
        g_xy.v[i] = k * ds_dcxy;
    }
    const Plane a_mu = box_mean_adjoint(g_mu, win, x.w, x.h);
    const Plane a_xx = box_mean_adjoint(g_xx, win, x.w, x.h);
    const Plane a_xy = box_mean_adjoint(g_xy, win, x.w, x.h);
    for (std::size_t p = 0; p < x.v.size(); ++p) {
        grad_x.v[p] += a_mu.v[p] + 2.0 * x.v[p] * a_xx.v[p] + y.v[p] * a_xy.v[p];
    }
    return total * inv_n;
}

} // namespace

MultiScaleSsim::MultiScaleSsim(int scales, int window) : scales_(scales), window_(window) {
    if (scales < 1 || window < 1) {
        throw ConfigError("MultiScaleSsim needs at least one scale and a positive window");
    }
}

ImageLoss MultiScaleSsim::evaluate(const Image& render, const Image& target) const {
    require_same(render, target, "perceptual_loss");
    const int coarse_w = render.width >> (scales_ - 1);
    const int coarse_h = render.height >> (scales_ - 1);
    if (coarse_w < window_ || coarse_h < window_) {
        throw DimensionError("perceptual_loss: image of " + std::to_string(render.width) + "x" +
                             std::to_string(render.height) + " is too small for " +
                             std::to_string(scales_) + " scales of " + std::to_string(window_) +
                             "x" + std::to_string(window_) + " windows");
    }
    ImageLoss out;
    out.grad = Image(render.width, render.height, render.channels);
    const double per_term = 1.0 / (static_cast<double>(scales_) * render.channels);
    for (int c = 0; c < render.channels; ++c) {
        std::vector<Plane> xs{channel_plane(render, c)};
        std::vector<Plane> ys{channel_plane(target, c)};
        for (int s = 1; s < scales_; ++s) {
            xs.push_back(pool2(xs.back()));
            ys.push_back(pool2(ys.back()));
        }
        std::vector<Plane> grads;
        for (const auto& x : xs) {
            grads.push_back({x.w, x.h, std::vector<double>(x.v.size(), 0.0)});
        }
        for (int s = 0; s < scales_; ++s) {
            // loss contribution: per_term * (1 - ssim)
            const double ssim = ssim_plane(xs[s], ys[s], window_, -per_term, grads[s]);
            out.value += per_term * (1.0 - ssim);
        }
        for (int s = scales_ - 1; s > 0; --s) {
            pool2_backward(grads[s], grads[s - 1]);
        }
        for (int y = 0; y < render.height; ++y) {
            for (int x = 0; x < render.width; ++x) {
                out.grad.at(x, y, c) = grads[0].at(x, y);
            }
        }
    }
    return out;
}

ImageLoss perceptual_loss(const Image& render, const Image& target) {
    return MultiScaleSsim().evaluate(render, target);
}

RigidLoss rigid_loss(std::span<const Mat3> jacobians) {
    RigidLoss out;
    out.grad.resize(jacobians.size(), Mat3::Zero());
    if (jacobians.empty()) {
        return out;
    }
    const double inv = 1.0 / static_cast<double>(jacobians.size());
    for (std::size_t i = 0; i < jacobians.size(); ++i) {
        const Mat3& j = jacobians[i];
        if (!j.allFinite()) {
            throw NumericError("rigid_loss: non-finite Jacobian");
        }
        const Mat3 diff = j - nearest_rotation(j);
        out.value += diff.cwiseAbs().sum();
        out.grad[i] = diff.unaryExpr([inv](double v) { return sign(v) * inv; });
    }
    out.value *= inv;
    return out;
}

namespace {

void add_scaled(Image& dst, const Image& src, double w) {
    if (src.data.empty()) {
        return;
    }
    if (dst.data.empty()) {
        dst = Image(src.width, src.height, src.channels);
    } else if (!dst.same_shape(src)) {
        throw DimensionError("total_loss: gradient images have different shapes");
    }
    if (w == 0.0) {
        return;
    }
    for (std::size_t i = 0; i < src.data.size(); ++i) {
        dst.data[i] += w * src.data[i];
    }
}

} // namespace

TotalLoss total_loss(const LossTerms& t, const LossWeights& w) {
    w.validate();
    TotalLoss out;
    out.value = w.sds * t.sds + w.rigid * t.rigid.value + w.perceptual * t.perceptual.value +
                w.l1 * t.l1.value + w.mask * t.mask.value;
    add_scaled(out.color_grad, t.l1.grad, w.l1);
    add_scaled(out.color_grad, t.perceptual.grad, w.perceptual);
    add_scaled(out.alpha_grad, t.mask.grad, w.mask);
    add_scaled(out.sds_grad, t.sds_grad, w.sds);
    out.jacobian_grad.resize(t.rigid.grad.size(), Mat3::Zero());
    for (std::size_t i = 0; i < t.rigid.grad.size(); ++i) {
        out.jacobian_grad[i] = w.rigid * t.rigid.grad[i];
    }
    return out;
}

} // namespace bags
