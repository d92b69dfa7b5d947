#pragma once

#include "bags/adam.hpp"
#include "bags/bone_rig.hpp"
#include "bags/dataset.hpp"
#include "bags/gaussian_cloud.hpp"
#include "bags/losses.hpp"
#include "bags/model.hpp"
#include "bags/prior.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace bags {

enum class Stage { Warmup, Joint, Done };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct LearningRates {
    double position = 1.6e-4;       // times the scene extent
    double position_final = 1.6e-6; // reached at the end of training, exponential decay
    double rotation = 2.5e-3;
    double scale = 2.5e-3;
    double opacity = 5e-2;
    double color = 1e-2;
    double rig = 5e-4;
    double rig_final = 5e-5; // reached at the end of the joint stage, exponential decay
    std::size_t rig_ramp = 500; // joint iterations of linear ramp-up from zero
    double root = 1e-4;
};

/// Orbit band for novel-view supervision. Radii are multiples of the scene extent.
struct SdsCameraConfig {
    double radius_min = 2.2;
    double radius_max = 3.0;
    double elevation_min_deg = -10.0;
    double elevation_max_deg = 45.0;
    double azimuth_min_deg = 0.0;
    double azimuth_max_deg = 360.0;
};

struct TrainConfig {
    std::size_t warmup_iterations = 2000;
    std::size_t joint_iterations = 8000;
    LossWeights weights;
    double warmup_tau_start = 0.98;
    double warmup_tau_end = 0.02;
    double joint_tau_start = 0.5;
    double joint_tau_end = 0.02;
    std::size_t curriculum_radius = 3;
    std::size_t curriculum_frames_per_interval = 2;
    std::size_t curriculum_interval = 50;
    LearningRates lr;
    std::size_t densify_interval = 100;
    std::size_t densify_until = 0; // 0: the whole warm-up
    std::size_t max_splats = 20000;
    DensifyConfig densify;
    SdsCameraConfig sds_camera;
    BoneRigConfig rig;
    std::size_t initial_splats = 2000;
    double initial_opacity = 0.1;
    int reference_frame = -1; // -1: the middle frame
    std::size_t eval_interval = 0; // 0: only after each stage
    std::uint64_t seed = 0;

    /// Throws ConfigError on out-of-range values.
    void validate() const;
    nlohmann::json to_json() const;
    /// Overlays keys from `j`; unknown keys throw ConfigError.
    static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Linear interpolation between the stage's endpoints, iteration in [0, stage length].
double tau_schedule(const TrainConfig& config, Stage stage, std::size_t iteration);

/// Reference frame plus its nearest neighbors, growing by `curriculum_frames_per_interval`
/// every `curriculum_interval` joint iterations. Sorted ascending.
std::vector<std::size_t> curriculum_frames(std::size_t frame_count, std::size_t reference,
                                           std::size_t joint_iteration, const TrainConfig& config);

/// Look-at camera on a sphere around `center`.
Camera sample_sds_camera(std::mt19937_64& rng, const SdsCameraConfig& config, const Vec3& center,
                         double extent, const Intrinsics& intrinsics);

/// PSNR of RGB images in [0, 1], capped at kPsnrCap when they are identical.
inline constexpr double kPsnrCap = 100.0;
double psnr(const Image& a, const Image& b);
/// Intersection over union of alpha > 0.5 against mask > 0.5; 1 when both are empty.
double mask_iou(const Image& alpha, const Image& mask);

struct Metrics {
    double psnr = 0.0;
    double iou = 0.0;
    double rigid = 0.0;        // mean over frames of rigid_loss
    double heldout_psnr = 0.0; // NaN when the dataset has no held-out views
    std::vector<double> frame_psnr;
    std::vector<double> frame_iou;
    std::vector<double> frame_rigid;

    nlohmann::json to_json() const;
};

/// Deterministic report over every training frame and held-out view.
Metrics evaluate(const Model& model, const Dataset& dataset);

struct TrainState {
    Stage stage = Stage::Warmup;
    std::size_t iteration = 0; // within the stage
    std::size_t reference_frame = 0;
    std::vector<std::size_t> active_frames;
    std::vector<AdamState> cloud_optim; // one per cloud parameter array
    std::vector<AdamState> rig_optim;   // one per rig parameter array
    std::vector<AdamState> root_optim;  // rotations, translations
    std::mt19937_64 rng;
    std::vector<nlohmann::json> history;
};

struct StepReport {
    double loss = 0.0;
    double l1 = 0.0;
    double mask = 0.0;
    double rigid = 0.0;
    double sds = 0.0;
    bool sds_skipped = false;
    std::size_t frame = 0;
};

/// Owns the model and optimizer state and runs warm-up then joint training.
class Trainer {
  public:
    Trainer(TrainConfig config, const Dataset& dataset, PriorProvider& prior);
    /// Resumes from a saved model and state.
    Trainer(TrainConfig config, const Dataset& dataset, PriorProvider& prior, Model model, TrainState state);

    const TrainConfig& config() const noexcept { return config_; }
    Model& model() noexcept { return model_; }
    const Model& model() const noexcept { return model_; }
    TrainState& state() noexcept { return state_; }
    const TrainState& state() const noexcept { return state_; }

    /// One iteration of the current stage; advances the stage when it completes.
    StepReport step();
    void warmup_stage();
    void joint_stage();
    /// Runs whatever remains of both stages and returns the final evaluation.
    Metrics run();

    /// Receives one JSON object per evaluation.
    std::function<void(const nlohmann::json&)> metrics_sink;
    /// Called with the model and state before a NumericError is raised for divergence.
    std::function<void(const Model&, const TrainState&)> divergence_dump;

  private:
    void initialize();
    void init_optimizers();
    StepReport train_step(bool joint);
    void apply_updates(bool joint);
    void check_finite(double loss);
    void maybe_densify();
    void record_eval();
    double position_lr() const;
    double rig_lr() const;

    TrainConfig config_;
    const Dataset& dataset_;
    PriorProvider& prior_;
    Model model_;
    TrainState state_;
};

} // namespace bags
