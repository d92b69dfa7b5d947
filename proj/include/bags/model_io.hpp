#pragma once

#include "bags/camera.hpp"
#include "bags/model.hpp"
#include "bags/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace bags {

inline constexpr std::string_view kMagic = "BAGS";
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kBundleVersion = 1;

/// Viewing defaults carried with a model so it renders without its dataset.
struct SceneInfo {
    Intrinsics intrinsics;
    Vec3 center = Vec3::Zero();
    double extent = 1.0;
};

struct Checkpoint {
    TrainConfig config;
    SceneInfo scene;
    Model model;
    TrainState state;
};

/// Serialized container: magic, version, "CKPT", payload length, payload, CRC-32 of the payload.
std::string encode_checkpoint(const Checkpoint& checkpoint);
/// Throws FormatError for bad magic, unsupported versions, truncation or checksum mismatch.
Checkpoint decode_checkpoint(std::string_view bytes);

/// Atomic write (temporary file, then rename).
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// In-memory form of the viewer bundle. Arrays are flat, row-major float32.
struct ViewerBundle {
    std::uint32_t splats = 0;
    std::uint32_t bones = 0;
    std::vector<float> positions;      // N x 3
    std::vector<float> quaternions;    // N x 4, unit, (w, x, y, z)
    std::vector<float> scales;         // N x 3, linear
    std::vector<float> opacities;      // N
    std::vector<float> colors;         // N x 3
    std::vector<float> weights;        // N x B, rows on the simplex
    std::vector<float> bone_centers;   // B x 3, canonical pose
    std::vector<float> bone_rotations; // B x 4, unit quaternions of the canonical pose
    std::vector<float> bone_precision; // B x 3, diagonal of D_b
};

/// Bakes skinning weights against the canonical bone pose.
ViewerBundle make_viewer_bundle(const Model& model);
std::string encode_viewer_bundle(const ViewerBundle& bundle);
/// Throws FormatError on bad magic, version or size.
ViewerBundle decode_viewer_bundle(std::string_view bytes);
/// Writes `path` and a JSON sidecar at `path` with extension ".json".
void export_viewer_bundle(const Model& model, const SceneInfo& scene, const std::filesystem::path& path);

/// One bone override: x -> R (x - c) + c + translation, c the bone's canonical center.
struct BoneOverride {
    Vec4 rotation = Vec4(1.0, 0.0, 0.0, 0.0);
    Vec3 translation = Vec3::Zero();
};

struct PoseKeyframe {
    double time = 0.0;
    std::vector<BoneOverride> bones; // one per bone; unlisted bones stay at identity
};

struct PoseFile {
    std::size_t bones = 0;
    std::vector<PoseKeyframe> keyframes; // strictly increasing times
};

/// Throws FormatError on schema problems and ConfigError on bad bone indices or times.
PoseFile parse_pose_file(const nlohmann::json& j);
PoseFile load_pose_file(const std::filesystem::path& path);
nlohmann::json pose_file_to_json(const PoseFile& pose);

/// Slerp/lerp between the bracketing keyframes, clamped at the ends.
std::vector<BoneOverride> interpolate_pose(const PoseFile& pose, double time);

/// Bone deltas realizing the overrides about the canonical centers.
std::vector<RigidTransform> override_deltas(const BonePose& canonical, std::span<const BoneOverride> bones);

} // namespace bags
