#include "bags/bone_rig.hpp"

#include "bags/error.hpp"
#include "bags/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace bags {

void BoneRigConfig::validate() const {
    if (bones < 1) {
        throw ConfigError("bone count must be at least 1");
    }
    if (frequencies < 1) {
        throw ConfigError("embedding frequency count must be at least 1");
    }
    if (layers < 1 || hidden_width < 1) {
        throw ConfigError("bone MLP needs at least one layer of positive width");
    }
}

std::vector<double> time_embedding(double t, std::size_t frequencies) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw ConfigError("time " + std::to_string(t) + " outside [0, 1]");
    }
    std::vector<double> out(2 * frequencies);
    for (std::size_t k = 0; k < frequencies; ++k) {
        const double arg = std::ldexp(std::numbers::pi * t, static_cast<int>(k));
        out[k] = std::sin(arg);
        out[frequencies + k] = std::cos(arg);
    }
    return out;
}

void BonePose::resize(std::size_t bones) {
    centers.assign(bones, Vec3::Zero());
    precision.assign(bones, Vec3::Ones());
    quaternions.assign(bones, Vec4(1.0, 0.0, 0.0, 0.0));
    rotations.assign(bones, Mat3::Identity());
}

Mat3 BonePose::metric(std::size_t b) const {
    const Mat3& m = rotations[b];
    return m.transpose() * precision[b].asDiagonal() * m;
}

void BonePoseGrad::resize(std::size_t bones) {
    centers.assign(bones, Vec3::Zero());
    precision.assign(bones, Vec3::Zero());
    rotations.assign(bones, Mat3::Zero());
}

void BonePoseGrad::add(const BonePoseGrad& other) {
    for (std::size_t b = 0; b < centers.size(); ++b) {
        centers[b] += other.centers[b];
        precision[b] += other.precision[b];
        rotations[b] += other.rotations[b];
    }
}

namespace {

std::vector<std::size_t> mlp_dims(const BoneRigConfig& c, std::size_t out) {
    std::vector<std::size_t> dims{2 * c.frequencies};
    for (std::size_t i = 0; i + 1 < c.layers; ++i) {
        dims.push_back(c.hidden_width);
    }
    dims.push_back(out);
    return dims;
}

BonePose assemble(const BoneRig& rig, const double* c_out, const double* d_out,
                  const double* m_out) {
    const std::size_t nb = rig.bone_count();
    BonePose pose;
    pose.resize(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        for (int k = 0; k < 3; ++k) {
            pose.centers[b][k] = rig.center_offsets()[b][k] + c_out[3 * b + k];
            pose.precision[b][k] = std::exp(rig.log_precision_offsets()[b][k] + d_out[3 * b + k]);
        }
        Vec4 q(1.0 + m_out[4 * b], m_out[4 * b + 1], m_out[4 * b + 2], m_out[4 * b + 3]);
        if (!q.allFinite() || q.norm() < 1e-12) {
            throw NumericError("bone rotation output is degenerate");
        }
        pose.quaternions[b] = q;
        pose.rotations[b] = quat_to_rotation(q);
        if (!pose.centers[b].allFinite() || !pose.precision[b].allFinite()) {
            throw NumericError("bone pose is not finite");
        }
    }
    return pose;
}

} // namespace

BoneRig::BoneRig(const BoneRigConfig& config, std::vector<Vec3> centers,
                 std::vector<Vec3> log_precision, double canonical_time)
    : config_(config), center_offsets_(std::move(centers)),
      log_precision_offsets_(std::move(log_precision)) {
    config_.validate();
    if (center_offsets_.size() != config_.bones || log_precision_offsets_.size() != config_.bones) {
        throw DimensionError("bone initialization does not match the configured bone count");
    }
    const std::size_t nb = config_.bones;
    center_net = Mlp(mlp_dims(config_, 3 * nb), config_.activation, config_.seed,
                     config_.final_scale);
    precision_net = Mlp(mlp_dims(config_, 3 * nb), config_.activation, config_.seed + 1,
                        config_.final_scale);
    rotation_net = Mlp(mlp_dims(config_, 4 * nb), config_.activation, config_.seed + 2,
                       config_.final_scale);
    canonical_embedding = DenseArray::from_values(
        {2 * config_.frequencies}, time_embedding(canonical_time, config_.frequencies));
}

BoneRig BoneRig::from_parts(const BoneRigConfig& config, Mlp center, Mlp precision, Mlp rotation,
                            DenseArray embedding, std::vector<Vec3> centers,
                            std::vector<Vec3> log_precision) {
    config.validate();
    const std::size_t nb = config.bones;
    const std::size_t in = 2 * config.frequencies;
    if (centers.size() != nb || log_precision.size() != nb || embedding.size() != in ||
        center.input_dim() != in || precision.input_dim() != in || rotation.input_dim() != in ||
        center.output_dim() != 3 * nb || precision.output_dim() != 3 * nb ||
        rotation.output_dim() != 4 * nb) {
        throw DimensionError("bone rig parts are inconsistent with its configuration");
    }
    BoneRig rig;
    rig.config_ = config;
    rig.center_net = std::move(center);
    rig.precision_net = std::move(precision);
    rig.rotation_net = std::move(rotation);
    rig.canonical_embedding = std::move(embedding);
    rig.center_offsets_ = std::move(centers);
    rig.log_precision_offsets_ = std::move(log_precision);
    return rig;
}

std::vector<DenseArray*> BoneRig::parameters() {
    std::vector<DenseArray*> out;
    for (Mlp* net : {&center_net, &precision_net, &rotation_net}) {
        auto p = net->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    out.push_back(&canonical_embedding);
    return out;
}

std::vector<const DenseArray*> BoneRig::parameters() const {
    std::vector<const DenseArray*> out;
    for (const Mlp* net : {&center_net, &precision_net, &rotation_net}) {
        auto p = net->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    out.push_back(&canonical_embedding);
    return out;
}

void BoneRig::zero_grad() {
    for (auto* p : parameters()) {
        p->zero_grad();
    }
}

BonePose pose_from_embedding(const BoneRig& rig, std::span<const double> embedding) {
    if (embedding.size() != rig.embedding_dim()) {
        throw DimensionError("embedding length does not match the rig");
    }
    const DenseArray in =
        DenseArray::from_values({embedding.size()}, {embedding.begin(), embedding.end()});
    const DenseArray c = mlp_evaluate(rig.center_net, in);
    const DenseArray d = mlp_evaluate(rig.precision_net, in);
    const DenseArray m = mlp_evaluate(rig.rotation_net, in);
    return assemble(rig, c.data(), d.data(), m.data());
}

BonePose predict_bone_pose(const BoneRig& rig, double t) {
    return pose_from_embedding(rig, time_embedding(t, rig.config().frequencies));
}

BonePose canonical_bone_pose(const BoneRig& rig) {
    return pose_from_embedding(rig, rig.canonical_embedding.values());
}

RigPoses rig_forward(BoneRig& rig, double t) {
    const std::size_t e = rig.embedding_dim();
    const auto gamma = time_embedding(t, rig.config().frequencies);
    DenseArray in({2, e});
    std::copy(gamma.begin(), gamma.end(), in.data());
    std::copy(rig.canonical_embedding.data(), rig.canonical_embedding.data() + e, in.data() + e);
    const DenseArray c = mlp_forward(rig.center_net, in);
    const DenseArray d = mlp_forward(rig.precision_net, in);
    const DenseArray m = mlp_forward(rig.rotation_net, in);
    const std::size_t nb = rig.bone_count();
    RigPoses out;
    out.target = assemble(rig, c.data(), d.data(), m.data());
    out.canonical = assemble(rig, c.data() + 3 * nb, d.data() + 3 * nb, m.data() + 4 * nb);
    return out;
}

void rig_backward(BoneRig& rig, const RigPoses& poses, const BonePoseGrad& target_grad,
                  const BonePoseGrad& canonical_grad) {
    const std::size_t nb = rig.bone_count();
    if (target_grad.centers.size() != nb || canonical_grad.centers.size() != nb) {
        throw DimensionError("rig_backward: gradient bone count differs from rig");
    }
    DenseArray gc({2, 3 * nb});
    DenseArray gd({2, 3 * nb});
    DenseArray gm({2, 4 * nb});
    const BonePose* pose[2] = {&poses.target, &poses.canonical};
    const BonePoseGrad* grad[2] = {&target_grad, &canonical_grad};
    for (std::size_t row = 0; row < 2; ++row) {
        for (std::size_t b = 0; b < nb; ++b) {
            const Vec4 gq = quat_to_rotation_backward(pose[row]->quaternions[b], grad[row]->rotations[b]);
            for (std::size_t k = 0; k < 3; ++k) {
                gc.at(row, 3 * b + k) = grad[row]->centers[b][k];
                gd.at(row, 3 * b + k) = grad[row]->precision[b][k] * pose[row]->precision[b][k];
            }
            for (std::size_t k = 0; k < 4; ++k) {
                gm.at(row, 4 * b + k) = gq[k];
            }
        }
    }
    const DenseArray in_c = mlp_backward(rig.center_net, gc);
    const DenseArray in_d = mlp_backward(rig.precision_net, gd);
    const DenseArray in_m = mlp_backward(rig.rotation_net, gm);
    auto ge = rig.canonical_embedding.grad();
    for (std::size_t k = 0; k < ge.size(); ++k) {
        ge[k] += in_c.at(1, k) + in_d.at(1, k) + in_m.at(1, k);
    }
}

std::vector<double> skinning_weights(const Vec3& x, const BonePose& pose) {
    const std::size_t nb = pose.size();
    std::vector<double> w(nb);
    double lowest = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < nb; ++b) {
        const Vec3 r = x - pose.centers[b];
        w[b] = r.dot(pose.metric(b) * r);
        lowest = std::min(lowest, w[b]);
    }
    double sum = 0.0;
    for (auto& v : w) {
        v = std::exp(lowest - v);
        sum += v;
    }
    for (auto& v : w) {
        v /= sum;
    }
    return w;
}

std::vector<RigidTransform> bone_delta_transforms(const BonePose& canonical, const BonePose& target) {
    if (canonical.size() != target.size()) {
        throw DimensionError("canonical and target poses have different bone counts");
    }
    std::vector<RigidTransform> out(canonical.size());
    for (std::size_t b = 0; b < out.size(); ++b) {
        out[b].rotation = target.rotations[b] * canonical.rotations[b].transpose();
        out[b].translation = target.centers[b] - out[b].rotation * canonical.centers[b];
    }
    return out;
}

void bone_delta_backward(const BonePose& canonical, const BonePose& target,
                         std::span<const RigidTransform> delta_grads, BonePoseGrad& canonical_grad,
                         BonePoseGrad& target_grad) {
    const std::size_t nb = canonical.size();
    if (delta_grads.size() != nb) {
        throw DimensionError("bone_delta_backward: gradient count differs from bone count");
    }
    for (std::size_t b = 0; b < nb; ++b) {
        const Mat3 l = target.rotations[b] * canonical.rotations[b].transpose();
        const Vec3& g_tau = delta_grads[b].translation;
        const Mat3 g_l = delta_grads[b].rotation - g_tau * canonical.centers[b].transpose();
        target_grad.centers[b] += g_tau;
        canonical_grad.centers[b] -= l.transpose() * g_tau;
        target_grad.rotations[b] += g_l * canonical.rotations[b];
        canonical_grad.rotations[b] += g_l.transpose() * target.rotations[b];
    }
}

namespace {

// Quantities shared by the warp forward and backward passes.
struct WarpTerms {
    std::vector<double> weights;
    std::vector<Vec3> displacement; // d_b = (L_b - I) x + tau_b
    std::vector<Vec3> metric_grad;  // g_b = -2 P_b (x - C_b), gradient of -W_b
    std::vector<Mat3> metric;       // P_b
    Vec3 mean_grad = Vec3::Zero();  // sum_b omega_b g_b
};

void check_bones(const BonePose& canonical, std::span<const RigidTransform> deltas) {
    if (canonical.size() == 0 || canonical.size() != deltas.size()) {
        throw DimensionError("warp: bone transforms do not match the canonical pose");
    }
}

WarpTerms warp_terms(const Vec3& x, const BonePose& canonical,
                     std::span<const RigidTransform> deltas) {
    const std::size_t nb = canonical.size();
    WarpTerms t;
    t.weights = skinning_weights(x, canonical);
    t.displacement.resize(nb);
    t.metric_grad.resize(nb);
    t.metric.resize(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        t.metric[b] = canonical.metric(b);
        t.displacement[b] = (deltas[b].rotation - Mat3::Identity()) * x + deltas[b].translation;
        t.metric_grad[b] = -2.0 * t.metric[b] * (x - canonical.centers[b]);
        t.mean_grad += t.weights[b] * t.metric_grad[b];
    }
    return t;
}

} // namespace

Vec3 warp_point(const Vec3& x, const BonePose& canonical, std::span<const RigidTransform> deltas) {
    check_bones(canonical, deltas);
    const auto w = skinning_weights(x, canonical);
    Vec3 y = x;
    for (std::size_t b = 0; b < w.size(); ++b) {
        y += w[b] * ((deltas[b].rotation - Mat3::Identity()) * x + deltas[b].translation);
    }
    return y;
}

WarpSample warp_gaussian(const Vec3& mean, const Mat3& covariance, const BonePose& canonical,
                         std::span<const RigidTransform> deltas) {
    check_bones(canonical, deltas);
    const WarpTerms t = warp_terms(mean, canonical, deltas);
    WarpSample out;
    out.mean = mean;
    out.jacobian = Mat3::Identity();
    for (std::size_t b = 0; b < canonical.size(); ++b) {
        const double w = t.weights[b];
        out.mean += w * t.displacement[b];
        out.jacobian += w * (deltas[b].rotation - Mat3::Identity()) +
                        w * t.displacement[b] * (t.metric_grad[b] - t.mean_grad).transpose();
    }
    if (!out.jacobian.allFinite()) {
        throw NumericError("warp Jacobian is not finite");
    }
    const Mat3 c = out.jacobian * covariance * out.jacobian.transpose();
    out.covariance = 0.5 * (c + c.transpose());
    out.weights = t.weights;
    return out;
}

WarpInputGrad warp_gaussian_backward(const Vec3& mean, const Mat3& covariance,
                                     const BonePose& canonical,
                                     std::span<const RigidTransform> deltas, const Vec3& grad_mean,
                                     const Mat3& grad_jacobian, const Mat3& grad_covariance,
                                     BonePoseGrad& canonical_grad,
                                     std::span<RigidTransform> delta_grads) {
    check_bones(canonical, deltas);
    const std::size_t nb = canonical.size();
    const WarpTerms t = warp_terms(mean, canonical, deltas);
    const Vec3& x = mean;

    Mat3 jac = Mat3::Identity();
    for (std::size_t b = 0; b < nb; ++b) {
        jac += t.weights[b] * (deltas[b].rotation - Mat3::Identity()) +
               t.weights[b] * t.displacement[b] * (t.metric_grad[b] - t.mean_grad).transpose();
    }

    WarpInputGrad out;
    // Sigma' = sym(J Sigma J^T)
    const Mat3 g_sym = 0.5 * (grad_covariance + grad_covariance.transpose());
    const Mat3 g_j = grad_jacobian + 2.0 * g_sym * jac * covariance;
    out.covariance = jac.transpose() * g_sym * jac;
    out.mean = grad_mean;

    std::vector<double> g_w(nb, 0.0);
    std::vector<Vec3> g_e(nb);
    std::vector<Vec3> g_d(nb);
    Vec3 g_mean_grad = Vec3::Zero();
    for (std::size_t b = 0; b < nb; ++b) {
        const double w = t.weights[b];
        const Mat3 l_minus_i = deltas[b].rotation - Mat3::Identity();
        const Vec3 e = t.metric_grad[b] - t.mean_grad;
        g_w[b] = grad_mean.dot(t.displacement[b]) + (g_j.cwiseProduct(l_minus_i)).sum() +
                 t.displacement[b].dot(g_j * e);
        g_d[b] = w * (grad_mean + g_j * e);
        g_e[b] = w * (g_j.transpose() * t.displacement[b]);
        g_mean_grad -= g_e[b];
        delta_grads[b].rotation += w * g_j + g_d[b] * x.transpose();
        delta_grads[b].translation += g_d[b];
        out.mean += l_minus_i.transpose() * g_d[b];
    }
    for (std::size_t b = 0; b < nb; ++b) {
        g_w[b] += t.metric_grad[b].dot(g_mean_grad);
    }
    double weighted = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
        weighted += t.weights[b] * g_w[b];
    }
    for (std::size_t b = 0; b < nb; ++b) {
        const Vec3 r = x - canonical.centers[b];
        const Mat3& p = t.metric[b];
        // g_b = -2 P_b r
        const Vec3 g_g = g_e[b] + t.weights[b] * g_mean_grad;
        Mat3 g_p = -2.0 * g_g * r.transpose();
        Vec3 g_r = -2.0 * p * g_g;
        // omega = softmax(-W), W_b = r^T P_b r
        const double g_dist = -t.weights[b] * (g_w[b] - weighted);
        g_p += g_dist * r * r.transpose();
        g_r += 2.0 * g_dist * (p * r);
        out.mean += g_r;
        canonical_grad.centers[b] -= g_r;
        const Mat3& m = canonical.rotations[b];
        const Vec3& d = canonical.precision[b];
        canonical_grad.rotations[b] += d.asDiagonal() * m * (g_p + g_p.transpose());
        canonical_grad.precision[b] += (m * g_p * m.transpose()).diagonal();
    }
    return out;
}

WarpResult warp_cloud(std::span<const Vec3> means, std::span<const Mat3> covariances,
                      const BonePose& canonical, std::span<const RigidTransform> deltas) {
    check_bones(canonical, deltas);
    if (means.size() != covariances.size()) {
        throw DimensionError("warp_cloud: means and covariances differ in length");
    }
    const std::size_t n = means.size();
    const std::size_t nb = canonical.size();
    WarpResult out;
    out.bones = nb;
    out.weights.resize(n * nb);
    out.means.resize(n);
    out.jacobians.resize(n);
    out.covariances.resize(n);
    parallel_for(n, 128, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            WarpSample s = warp_gaussian(means[i], covariances[i], canonical, deltas);
            std::copy(s.weights.begin(), s.weights.end(), out.weights.begin() + i * nb);
            out.means[i] = s.mean;
            out.jacobians[i] = s.jacobian;
            out.covariances[i] = s.covariance;
        }
    });
    return out;
}

WarpCloudGrad warp_cloud_backward(std::span<const Vec3> means, std::span<const Mat3> covariances,
                                  const BonePose& canonical, std::span<const RigidTransform> deltas,
                                  std::span<const Vec3> grad_means,
                                  std::span<const Mat3> grad_jacobians,
                                  std::span<const Mat3> grad_covariances) {
    check_bones(canonical, deltas);
    const std::size_t n = means.size();
    const std::size_t nb = canonical.size();
    if (covariances.size() != n || (!grad_means.empty() && grad_means.size() != n) ||
        (!grad_jacobians.empty() && grad_jacobians.size() != n) ||
        (!grad_covariances.empty() && grad_covariances.size() != n)) {
        throw DimensionError("warp_cloud_backward: inconsistent lengths");
    }
    constexpr std::size_t kChunk = 256;
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    struct Partial {
        BonePoseGrad canonical;
        std::vector<RigidTransform> deltas;
    };
    std::vector<Partial> partial(chunks);
    WarpCloudGrad out;
    out.means.resize(n);
    out.covariances.resize(n);
    parallel_for(chunks, 1, [&](std::size_t begin, std::size_t end) {
        for (std::size_t c = begin; c < end; ++c) {
            Partial& p = partial[c];
            p.canonical.resize(nb);
            p.deltas.assign(nb, RigidTransform{Mat3::Zero(), Vec3::Zero()});
            const std::size_t last = std::min(n, (c + 1) * kChunk);
            for (std::size_t i = c * kChunk; i < last; ++i) {
                const Vec3 gm = grad_means.empty() ? Vec3::Zero() : grad_means[i];
                const Mat3 gj = grad_jacobians.empty() ? Mat3::Zero() : grad_jacobians[i];
                const Mat3 gs = grad_covariances.empty() ? Mat3::Zero() : grad_covariances[i];
                const WarpInputGrad g = warp_gaussian_backward(means[i], covariances[i], canonical,
                                                               deltas, gm, gj, gs, p.canonical,
                                                               p.deltas);
                out.means[i] = g.mean;
                out.covariances[i] = g.covariance;
            }
        }
    });
    out.canonical.resize(nb);
    out.deltas.assign(nb, RigidTransform{Mat3::Zero(), Vec3::Zero()});
    for (const Partial& p : partial) {
        out.canonical.add(p.canonical);
        for (std::size_t b = 0; b < nb; ++b) {
            out.deltas[b].rotation += p.deltas[b].rotation;
            out.deltas[b].translation += p.deltas[b].translation;
        }
    }
    return out;
}

std::vector<Vec3> farthest_point_sampling(std::span<const Vec3> points, std::size_t count) {
    if (points.empty() || count == 0) {
        throw ConfigError("farthest_point_sampling needs points and a positive count");
    }
    Vec3 centroid = Vec3::Zero();
    for (const auto& p : points) {
        centroid += p;
    }
    centroid /= static_cast<double>(points.size());
    std::size_t first = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points.size(); ++i) {
        const double d = (points[i] - centroid).squaredNorm();
        if (d < best) {
            best = d;
            first = i;
        }
    }
    std::vector<Vec3> out{points[first]};
    std::vector<double> dist(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        dist[i] = (points[i] - points[first]).squaredNorm();
    }
    while (out.size() < count) {
        const auto it = std::max_element(dist.begin(), dist.end());
        const Vec3 next = points[static_cast<std::size_t>(it - dist.begin())];
        out.push_back(next);
        for (std::size_t i = 0; i < points.size(); ++i) {
            dist[i] = std::min(dist[i], (points[i] - next).squaredNorm());
        }
    }
    return out;
}

} // namespace bags
