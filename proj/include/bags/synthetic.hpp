#pragma once

#include "bags/camera.hpp"
#include "bags/gaussian_cloud.hpp"
#include "bags/renderer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace bags {

/// Procedural two-bone arm: an upper arm along -x and a forearm along +x, hinged at the
/// origin. The forearm swings about +z from 0 to `max_elbow_deg` over the sequence.
struct ArmSceneConfig {
    std::size_t splats = 2000;
    std::size_t frames = 20;
    int width = 128;
    int height = 128;
    double focal = 120.0;
    double distance = 2.6;
    double elevation_deg = 20.0;
    double azimuth_min_deg = -40.0;
    double azimuth_max_deg = 40.0;
    double max_elbow_deg = 80.0;
    std::vector<double> held_out_azimuths_deg{90.0, 180.0};
    std::size_t held_out_stride = 4; // every n-th frame gets the held-out views
    std::uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static ArmSceneConfig from_json(const nlohmann::json& j);
};

class ArmScene {
  public:
    explicit ArmScene(ArmSceneConfig config);

    const ArmSceneConfig& config() const noexcept { return config_; }
    const GaussianCloud& cloud() const noexcept { return cloud_; }
    Intrinsics intrinsics() const;

    double elbow_angle(double t) const;
    SplatSet posed(double t) const;
    RenderOutput render(const Camera& camera, double t) const;

    /// Normalized time of frame i.
    double frame_time(std::size_t i) const;
    Camera frame_camera(std::size_t i) const;
    Camera orbit_camera(double azimuth_deg, double elevation_deg) const;

  private:
    ArmSceneConfig config_;
    GaussianCloud cloud_;
    std::vector<std::uint8_t> on_forearm_;
};

/// Writes PNG frames, masks, held-out views and manifest.json into `dir`.
void write_arm_dataset(const ArmSceneConfig& config, const std::filesystem::path& dir);

} // namespace bags
