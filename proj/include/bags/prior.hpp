#pragma once

#include "bags/camera.hpp"
#include "bags/image.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>

namespace bags {

/// Everything a prior sees for one score-distillation sample.
struct PriorRequest {
    const Image* render = nullptr;    // novel-view render, H x W x 3
    const Image* reference = nullptr; // conditioning frame I_t
    Camera camera;                    // novel view P
    Vec3 look_at = Vec3::Zero();
    double time = 0.0; // normalized frame time of the reference
    double tau = 0.5;
    std::uint64_t seed = 0;
};

/// Image-space gradient returned by a prior. A zero grad means the provider abstained.
struct PriorGradient {
    Image grad;
    double weight = 1.0;
};

class PriorProvider {
  public:
    virtual ~PriorProvider() = default;
    virtual std::string name() const = 0;
    /// Must not modify the request images. Throws on failure.
    virtual PriorGradient gradient(const PriorRequest& request) = 0;
};

class ZeroProvider final : public PriorProvider {
  public:
    std::string name() const override { return "zero"; }
    PriorGradient gradient(const PriorRequest& request) override;
};

/// Gaussian noise drawn from the request seed; a stand-in for a stochastic score model.
class NoiseProvider final : public PriorProvider {
  public:
    explicit NoiseProvider(double sigma = 0.01) : sigma_(sigma) {}
    std::string name() const override { return "noise"; }
    PriorGradient gradient(const PriorRequest& request) override;

  private:
    double sigma_;
};

/// Ground-truth renderer for a (camera, time) pair.
using GroundTruthFn = std::function<Image(const Camera&, double time)>;

/// Returns 2 (render - ground truth), the gradient of the squared error on the novel view.
class OracleProvider final : public PriorProvider {
  public:
    explicit OracleProvider(GroundTruthFn ground_truth);
    std::string name() const override { return "oracle"; }
    PriorGradient gradient(const PriorRequest& request) override;

  private:
    GroundTruthFn ground_truth_;
};

struct RemoteConfig {
    std::string url; // http://host:port/path
    double timeout_s = 30.0;
    int retries = 2;
};

/// JSON over HTTP. Request: {render, reference (base64 PNG), camera {position, look_at, up,
/// fov_deg}, tau, seed}. Response: {grad (base64 little-endian float32 H x W x 3), weight}.
class RemoteProvider final : public PriorProvider {
  public:
    explicit RemoteProvider(RemoteConfig config);
    std::string name() const override { return "remote"; }
    PriorGradient gradient(const PriorRequest& request) override;

    static std::string encode_request(const PriorRequest& request);
    /// Throws FormatError on malformed bodies or shape mismatch.
    static PriorGradient decode_response(const std::string& body, int width, int height);

  private:
    RemoteConfig config_;
    std::string base_;
    std::string path_;
};

/// Little-endian float32 encoding used by the remote wire format.
std::string encode_float32_image(const Image& image);

struct SdsResult {
    double value = 0.0; // 0.5 * sum(grad^2) / pixels, for reporting only
    Image grad;         // lambda * weight * provider gradient
    bool skipped = false;
};

/// Calls the provider and scales its gradient. Provider failures are logged and turn into a
/// skipped step with zero gradient. Throws ConfigError unless 0 < tau < 1.
SdsResult sds_step(PriorProvider& provider, const PriorRequest& request, double lambda = 1.0);

/// Parses "zero", "noise", "oracle" or "remote:URL". `ground_truth` is required for the oracle.
std::unique_ptr<PriorProvider> make_prior(const std::string& spec, GroundTruthFn ground_truth = {});

} // namespace bags
