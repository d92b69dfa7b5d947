#pragma once

#include "bags/geometry.hpp"
#include "bags/image.hpp"

#include <memory>
#include <span>
#include <vector>

namespace bags {

struct LossWeights {
    double sds = 1e-4;
    double rigid = 0.1;
    double perceptual = 0.1;
    double l1 = 0.1;
    double mask = 1.0;

    /// Throws ConfigError on negative or non-finite weights.
    void validate() const;
};

/// Scalar loss with its gradient with respect to the evaluated image.
struct ImageLoss {
    double value = 0.0;
    Image grad;
};

/// Mean absolute error over masked pixels and all channels, weighted by the mask value.
/// Throws ConfigError when the mask is all zero.
ImageLoss l1_loss(const Image& render, const Image& target, const Image& mask);

/// Mean |alpha - mask| over all pixels.
ImageLoss mask_loss(const Image& alpha, const Image& mask);

/// Image-similarity seam for the perceptual term.
class PerceptualLoss {
  public:
    virtual ~PerceptualLoss() = default;
    virtual ImageLoss evaluate(const Image& render, const Image& target) const = 0;
};

/// Mean over dyadic scales of (1 - mean SSIM), box windows, 2x2 average pooling between scales.
class MultiScaleSsim final : public PerceptualLoss {
  public:
    explicit MultiScaleSsim(int scales = 3, int window = 7);
    /// Throws DimensionError when the coarsest scale is smaller than the window.
    ImageLoss evaluate(const Image& render, const Image& target) const override;

  private:
    int scales_;
    int window_;
};

ImageLoss perceptual_loss(const Image& render, const Image& target);

struct RigidLoss {
    double value = 0.0;
    std::vector<Mat3> grad; // with the nearest rotation held fixed
};

/// Mean over matrices of sum |J - R*(J)|, R* the nearest proper rotation.
RigidLoss rigid_loss(std::span<const Mat3> jacobians);

/// Per-term values and gradients for one training step.
struct LossTerms {
    double sds = 0.0;
    Image sds_grad; // gradient on the novel-view render, already provider-weighted
    RigidLoss rigid;
    ImageLoss perceptual;
    ImageLoss l1;
    ImageLoss mask;
};

struct TotalLoss {
    double value = 0.0;
    Image color_grad;                 // frame render: l1 + perceptual
    Image alpha_grad;                 // frame render: mask
    Image sds_grad;                   // novel-view render
    std::vector<Mat3> jacobian_grad;  // warp Jacobians
};

/// Weighted sum of the terms with gradients routed to their inputs. Missing (empty)
/// gradients are treated as zero.
TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights);

} // namespace bags
