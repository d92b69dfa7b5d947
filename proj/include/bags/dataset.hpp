#pragma once

#include "bags/camera.hpp"
#include "bags/image.hpp"
#include "bags/prior.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace bags {

struct Frame {
    std::string name; // image path as written in the manifest
    Image image;      // RGB in [0, 1]
    Image mask;       // binarized at 0.5
    double time = 0.0; // manifest time index
    double t = 0.0;    // normalized to [0, 1] over the training frames
    Camera camera;
};

struct Dataset {
    Intrinsics intrinsics;
    double scene_extent = 1.0;
    Vec3 scene_center = Vec3::Zero();
    Vec3 background = Vec3::Zero();
    std::vector<Frame> frames;
    std::vector<Frame> held_out;
    /// Ground-truth renderer for synthetic manifests; empty otherwise.
    GroundTruthFn oracle;

    std::vector<double> normalized_times() const;
    /// Maps a manifest time index onto the normalized training range.
    double normalize_time(double time) const;
};

/// Camera used for frames without one: on the -z axis at 2.5 extents, looking at the center.
Camera default_camera(const Intrinsics& intrinsics, const Vec3& center, double extent);

/// Reads manifest JSON and every referenced image. Throws IoError for missing files,
/// DimensionError for size mismatches, FormatError for schema problems and ConfigError
/// for an empty or non-monotone sequence.
Dataset load_dataset(const std::filesystem::path& manifest);

} // namespace bags
