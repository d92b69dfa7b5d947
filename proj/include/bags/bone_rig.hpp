#pragma once

#include "bags/dense_array.hpp"
#include "bags/geometry.hpp"
#include "bags/mlp.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace bags {

struct BoneRigConfig {
    std::size_t bones = 16;
    std::size_t frequencies = 6; // embedding has 2 * frequencies entries
    std::size_t hidden_width = 128;
    std::size_t layers = 4; // linear layers per MLP
    Activation activation = Activation::Softplus;
    double final_scale = 1e-3;
    std::uint64_t seed = 0;

    void validate() const;
};

/// (sin(2^k pi t), cos(2^k pi t)) for k = 0..L-1, sines first. Throws ConfigError outside [0, 1].
std::vector<double> time_embedding(double t, std::size_t frequencies);

/// Per-bone ellipsoids. `precision` holds the diagonal D_b; `quaternions` are the raw
/// (unnormalized) network outputs and `rotations` their normalized matrices M_b.
struct BonePose {
    std::vector<Vec3> centers;
    std::vector<Vec3> precision;
    std::vector<Vec4> quaternions;
    std::vector<Mat3> rotations;

    std::size_t size() const noexcept { return centers.size(); }
    void resize(std::size_t bones);
    /// P_b = M_b^T diag(D_b) M_b.
    Mat3 metric(std::size_t b) const;
};

/// Gradient with respect to a BonePose (rotation gradients are taken on M_b).
struct BonePoseGrad {
    std::vector<Vec3> centers;
    std::vector<Vec3> precision;
    std::vector<Mat3> rotations;

    void resize(std::size_t bones);
    void add(const BonePoseGrad& other);
};

/// Three MLPs map an embedding to bone centers, log-precisions and quaternions. The
/// canonical pose is predicted from a learnable embedding through the same networks.
class BoneRig {
  public:
    BoneRig() = default;
    /// `centers` and `log_precision` (B x 3 each) are the offsets added to the network outputs.
    BoneRig(const BoneRigConfig& config, std::vector<Vec3> centers,
            std::vector<Vec3> log_precision, double canonical_time);

    const BoneRigConfig& config() const noexcept { return config_; }
    std::size_t bone_count() const noexcept { return center_offsets_.size(); }
    std::size_t embedding_dim() const noexcept { return 2 * config_.frequencies; }

    Mlp center_net;
    Mlp precision_net;
    Mlp rotation_net;
    DenseArray canonical_embedding;

    const std::vector<Vec3>& center_offsets() const noexcept { return center_offsets_; }
    const std::vector<Vec3>& log_precision_offsets() const noexcept { return log_precision_offsets_; }

    /// Trainable arrays: the three networks' weights followed by the canonical embedding.
    std::vector<DenseArray*> parameters();
    std::vector<const DenseArray*> parameters() const;
    void zero_grad();

    /// Reassembles a rig from stored parts; used by deserialization.
    static BoneRig from_parts(const BoneRigConfig& config, Mlp center, Mlp precision, Mlp rotation,
                              DenseArray embedding, std::vector<Vec3> centers,
                              std::vector<Vec3> log_precision);

  private:
    BoneRigConfig config_;
    std::vector<Vec3> center_offsets_;
    std::vector<Vec3> log_precision_offsets_;
};

/// Tape-free evaluation at time t.
BonePose predict_bone_pose(const BoneRig& rig, double t);
/// Tape-free evaluation of the canonical pose.
BonePose canonical_bone_pose(const BoneRig& rig);
/// Pose from an arbitrary embedding vector.
BonePose pose_from_embedding(const BoneRig& rig, std::span<const double> embedding);

/// Target and canonical pose evaluated as one batch, with tapes recorded for rig_backward.
struct RigPoses {
    BonePose target;
    BonePose canonical;
};
RigPoses rig_forward(BoneRig& rig, double t);

/// Accumulates network and embedding gradients from the last rig_forward.
void rig_backward(BoneRig& rig, const RigPoses& poses, const BonePoseGrad& target_grad,
                  const BonePoseGrad& canonical_grad);

/// omega = softmax(-W) with W_b = (x - C_b)^T P_b (x - C_b).
std::vector<double> skinning_weights(const Vec3& x, const BonePose& pose);

/// L_b = M^t_b (M^c_b)^T and tau_b = C^t_b - L_b C^c_b.
std::vector<RigidTransform> bone_delta_transforms(const BonePose& canonical, const BonePose& target);

/// Adds the gradient of bone_delta_transforms into both pose gradients.
void bone_delta_backward(const BonePose& canonical, const BonePose& target,
                         std::span<const RigidTransform> delta_grads, BonePoseGrad& canonical_grad,
                         BonePoseGrad& target_grad);

/// Warp of one canonical Gaussian. The map is x -> sum_b omega_b(x) (L_b x + tau_b), with
/// weights from the canonical pose; `jacobian` is its spatial derivative at the mean.
struct WarpSample {
    std::vector<double> weights;
    Vec3 mean;
    Mat3 jacobian;
    Mat3 covariance;
};

/// Point-only form of the warp map, used for finite-difference checks.
Vec3 warp_point(const Vec3& x, const BonePose& canonical, std::span<const RigidTransform> deltas);

WarpSample warp_gaussian(const Vec3& mean, const Mat3& covariance, const BonePose& canonical,
                         std::span<const RigidTransform> deltas);

/// Gradients of one warp with respect to its inputs. Bone gradients are added to
/// `canonical_grad` and `delta_grads`; the returned values are the Gaussian's own.
struct WarpInputGrad {
    Vec3 mean = Vec3::Zero();
    Mat3 covariance = Mat3::Zero();
};
WarpInputGrad warp_gaussian_backward(const Vec3& mean, const Mat3& covariance,
                                     const BonePose& canonical,
                                     std::span<const RigidTransform> deltas, const Vec3& grad_mean,
                                     const Mat3& grad_jacobian, const Mat3& grad_covariance,
                                     BonePoseGrad& canonical_grad,
                                     std::span<RigidTransform> delta_grads);

struct WarpResult {
    std::size_t bones = 0;
    std::vector<double> weights; // N x B
    std::vector<Vec3> means;
    std::vector<Mat3> jacobians;
    std::vector<Mat3> covariances;

    std::size_t size() const noexcept { return means.size(); }
};

/// Warps every Gaussian in parallel.
WarpResult warp_cloud(std::span<const Vec3> means, std::span<const Mat3> covariances,
                      const BonePose& canonical, std::span<const RigidTransform> deltas);

struct WarpCloudGrad {
    std::vector<Vec3> means;
    std::vector<Mat3> covariances;
    BonePoseGrad canonical;
    std::vector<RigidTransform> deltas;
};

/// Backward of warp_cloud. Bone gradients are reduced over fixed-size chunks in chunk order,
/// so results do not depend on the thread count. Either grad span may be empty (treated as 0).
WarpCloudGrad warp_cloud_backward(std::span<const Vec3> means, std::span<const Mat3> covariances,
                                  const BonePose& canonical, std::span<const RigidTransform> deltas,
                                  std::span<const Vec3> grad_means,
                                  std::span<const Mat3> grad_jacobians,
                                  std::span<const Mat3> grad_covariances);

/// Picks `count` well-spread points, starting from the one closest to the centroid.
std::vector<Vec3> farthest_point_sampling(std::span<const Vec3> points, std::size_t count);

} // namespace bags
