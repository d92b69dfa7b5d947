#include "bags/dataset.hpp"

#include "bags/error.hpp"
#include "bags/io_util.hpp"
#include "bags/synthetic.hpp"

#include <json.hpp>

#include <algorithm>
#include <memory>

namespace bags {

using nlohmann::json;

std::vector<double> Dataset::normalized_times() const {
    std::vector<double> out;
    out.reserve(frames.size());
    for (const auto& f : frames) {
        out.push_back(f.t);
    }
    return out;
}

double Dataset::normalize_time(double time) const {
    if (frames.size() < 2) {
        return 0.0;
    }
    return (time - frames.front().time) / (frames.back().time - frames.front().time);
}

Camera default_camera(const Intrinsics& intrinsics, const Vec3& center, double extent) {
    return Camera::look_at(center - Vec3(0.0, 0.0, 2.5 * extent), center, Vec3::UnitY(), intrinsics);
}

namespace {

template <typename T> T field(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) {
        throw FormatError(where + ": missing '" + key + "'");
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw FormatError(where + ": bad '" + key + "': " + e.what());
    }
}

Vec3 vec3_field(const json& j, const char* key, const std::string& where) {
    const auto v = field<std::vector<double>>(j, key, where);
    if (v.size() != 3) {
        throw FormatError(where + ": '" + key + "' needs 3 numbers");
    }
    return Vec3(v[0], v[1], v[2]);
}

Camera parse_camera(const json& j, const Intrinsics& in, const std::string& where) {
    const auto r = field<std::vector<double>>(j, "rotation", where);
    if (r.size() != 9) {
        throw FormatError(where + ": camera rotation needs 9 numbers (row-major)");
    }
    Camera cam;
    cam.intrinsics = in;
    for (int i = 0; i < 9; ++i) {
        cam.world_to_camera.rotation(i / 3, i % 3) = r[i];
    }
    cam.world_to_camera.translation = vec3_field(j, "translation", where);
    cam.validate();
    return cam;
}

Frame load_frame(const json& j, const std::filesystem::path& root, const Dataset& ds, const std::string& where) {
    Frame f;
    f.name = field<std::string>(j, "image", where);
    const auto mask_name = field<std::string>(j, "mask", where);
    f.time = field<double>(j, "time", where);
    f.image = load_image(root / f.name, 3);
    f.mask = load_image(root / mask_name, 1);
    if (f.image.width != ds.intrinsics.width || f.image.height != ds.intrinsics.height) {
        throw DimensionError(where + " (" + f.name + "): image is " + std::to_string(f.image.width) + "x" +
                             std::to_string(f.image.height) + ", intrinsics say " +
                             std::to_string(ds.intrinsics.width) + "x" + std::to_string(ds.intrinsics.height));
    }
    if (f.mask.width != f.image.width || f.mask.height != f.image.height) {
        throw DimensionError(where + " (" + f.name + "): mask " + mask_name + " does not match the image size");
    }
    for (double& v : f.mask.data) {
        v = v >= 0.5 ? 1.0 : 0.0;
    }
    f.camera = j.contains("camera") ? parse_camera(j["camera"], ds.intrinsics, where)
                                    : default_camera(ds.intrinsics, ds.scene_center, ds.scene_extent);
    return f;
}

} // namespace

Dataset load_dataset(const std::filesystem::path& manifest) {
    if (!std::filesystem::exists(manifest)) {
        throw IoError("manifest not found: " + manifest.string());
    }
    json j;
    try {
        j = json::parse(read_file(manifest));
    } catch (const json::exception& e) {
        throw FormatError("manifest " + manifest.string() + " is not valid JSON: " + e.what());
    }
    const std::string where = manifest.string();
    if (!j.is_object()) {
        throw FormatError(where + ": manifest must be a JSON object");
    }
    Dataset ds;
    const json& in = j.contains("intrinsics") ? j["intrinsics"] : json();
    ds.intrinsics.fx = field<double>(in, "fx", where + " intrinsics");
    ds.intrinsics.fy = field<double>(in, "fy", where + " intrinsics");
    ds.intrinsics.cx = field<double>(in, "cx", where + " intrinsics");
    ds.intrinsics.cy = field<double>(in, "cy", where + " intrinsics");
    ds.intrinsics.width = field<int>(in, "width", where + " intrinsics");
    ds.intrinsics.height = field<int>(in, "height", where + " intrinsics");
    if (!(ds.intrinsics.fx > 0.0 && ds.intrinsics.fy > 0.0) || ds.intrinsics.width <= 0 || ds.intrinsics.height <= 0) {
        throw ConfigError(where + ": intrinsics must be positive");
    }
    ds.scene_extent = j.value("scene_extent", 1.0);
    if (!(ds.scene_extent > 0.0)) {
        throw ConfigError(where + ": scene_extent must be positive");
    }
    if (j.contains("scene_center")) {
        ds.scene_center = vec3_field(j, "scene_center", where);
    }
    if (j.contains("background")) {
        ds.background = vec3_field(j, "background", where);
    }
    const std::filesystem::path root = manifest.parent_path();
    if (!j.contains("frames") || !j["frames"].is_array() || j["frames"].empty()) {
        throw ConfigError(where + ": manifest has no frames");
    }
    for (std::size_t i = 0; i < j["frames"].size(); ++i) {
        ds.frames.push_back(load_frame(j["frames"][i], root, ds, where + " frame " + std::to_string(i)));
        if (i > 0 && !(ds.frames[i].time > ds.frames[i - 1].time)) {
            throw ConfigError(where + ": frame " + std::to_string(i) + " time " + std::to_string(ds.frames[i].time) +
                              " does not increase");
        }
    }
    for (auto& f : ds.frames) {
        f.t = ds.normalize_time(f.time);
    }
    if (j.contains("held_out")) {
        for (std::size_t i = 0; i < j["held_out"].size(); ++i) {
            Frame f = load_frame(j["held_out"][i], root, ds, where + " held-out view " + std::to_string(i));
            f.t = std::clamp(ds.normalize_time(f.time), 0.0, 1.0);
            ds.held_out.push_back(std::move(f));
        }
    }
    if (j.contains("oracle")) {
        const auto generator = field<std::string>(j["oracle"], "generator", where + " oracle");
        if (generator != "two_bone_arm") {
            throw FormatError(where + ": unknown oracle generator '" + generator + "'");
        }
        auto scene = std::make_shared<ArmScene>(
            ArmSceneConfig::from_json(j["oracle"].contains("config") ? j["oracle"]["config"] : json::object()));
        ds.oracle = [scene](const Camera& camera, double t) { return scene->render(camera, t).color; };
    }
    return ds;
}

} // namespace bags
