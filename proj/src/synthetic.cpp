#include "bags/synthetic.hpp"

#include "bags/error.hpp"
#include "bags/image.hpp"
#include "bags/io_util.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <random>

namespace bags {

using nlohmann::json;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct Capsule {
    Vec3 a;
    Vec3 b;
    double radius;
};

// Uniform point on the capsule surface, pushed inward by a random fraction of the radius.
Vec3 sample_capsule(const Capsule& c, std::mt19937_64& rng, double& axial) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double len = (c.b - c.a).norm();
    const double side = 2.0 * std::numbers::pi * c.radius * len;
    const double caps = 4.0 * std::numbers::pi * c.radius * c.radius;
    const Vec3 axis = (c.b - c.a) / len;
    const Vec3 e1 = axis.unitOrthogonal();
    const Vec3 e2 = axis.cross(e1);
    const double depth = c.radius * (0.75 + 0.25 * u(rng));
    if (u(rng) * (side + caps) < side) {
        axial = u(rng);
        const double phi = 2.0 * std::numbers::pi * u(rng);
        return c.a + axial * (c.b - c.a) + depth * (std::cos(phi) * e1 + std::sin(phi) * e2);
    }
    Vec3 d;
    do {
        d = Vec3(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5);
    } while (d.norm() < 1e-3 || d.norm() > 0.5);
    d.normalize();
    const bool at_b = d.dot(axis) > 0.0;
    axial = at_b ? 1.0 : 0.0;
    return (at_b ? c.b : c.a) + depth * d;
}

Vec4 random_unit_quaternion(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    return quat_normalized(Vec4(n(rng), n(rng), n(rng), n(rng)));
}

void write_camera(json& j, const Camera& cam) {
    const Mat3& r = cam.world_to_camera.rotation;
    j["rotation"] = {r(0, 0), r(0, 1), r(0, 2), r(1, 0), r(1, 1), r(1, 2), r(2, 0), r(2, 1), r(2, 2)};
    const Vec3& t = cam.world_to_camera.translation;
    j["translation"] = {t.x(), t.y(), t.z()};
}

} // namespace

void ArmSceneConfig::validate() const {
    if (splats < 2 || frames < 1 || width < 8 || height < 8 || !(focal > 0.0) || !(distance > 0.0) ||
        held_out_stride == 0) {
        throw ConfigError("arm scene config out of range");
    }
}

json ArmSceneConfig::to_json() const {
    return {{"splats", splats},
            {"frames", frames},
            {"width", width},
            {"height", height},
            {"focal", focal},
            {"distance", distance},
            {"elevation_deg", elevation_deg},
            {"azimuth_min_deg", azimuth_min_deg},
            {"azimuth_max_deg", azimuth_max_deg},
            {"max_elbow_deg", max_elbow_deg},
            {"held_out_azimuths_deg", held_out_azimuths_deg},
            {"held_out_stride", held_out_stride},
            {"seed", seed}};
}

ArmSceneConfig ArmSceneConfig::from_json(const json& j) {
    ArmSceneConfig c;
    try {
        c.splats = j.value("splats", c.splats);
        c.frames = j.value("frames", c.frames);
        c.width = j.value("width", c.width);
        c.height = j.value("height", c.height);
        c.focal = j.value("focal", c.focal);
        c.distance = j.value("distance", c.distance);
        c.elevation_deg = j.value("elevation_deg", c.elevation_deg);
        c.azimuth_min_deg = j.value("azimuth_min_deg", c.azimuth_min_deg);
        c.azimuth_max_deg = j.value("azimuth_max_deg", c.azimuth_max_deg);
        c.max_elbow_deg = j.value("max_elbow_deg", c.max_elbow_deg);
        c.held_out_azimuths_deg = j.value("held_out_azimuths_deg", c.held_out_azimuths_deg);
        c.held_out_stride = j.value("held_out_stride", c.held_out_stride);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw FormatError(std::string("arm scene config: ") + e.what());
    }
    c.validate();
    return c;
}

ArmScene::ArmScene(ArmSceneConfig config) : config_(std::move(config)) {
    config_.validate();
    const Capsule upper{Vec3(-0.5, 0.0, 0.0), Vec3(0.0, 0.0, 0.0), 0.12};
    const Capsule fore{Vec3(0.0, 0.0, 0.0), Vec3(0.5, 0.0, 0.0), 0.10};
    std::mt19937_64 rng(config_.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Gaussian> gs(config_.splats);
    on_forearm_.resize(config_.splats);
    const std::size_t n_upper = config_.splats / 2;
    for (std::size_t i = 0; i < gs.size(); ++i) {
        const bool forearm = i >= n_upper;
        double axial = 0.0;
        Gaussian& g = gs[i];
        g.position = sample_capsule(forearm ? fore : upper, rng, axial);
        g.rotation = random_unit_quaternion(rng);
        const double s = 0.03 + 0.01 * u(rng);
        g.log_scale = Vec3(std::log(s), std::log(s * (0.6 + 0.4 * u(rng))), std::log(s * (0.6 + 0.4 * u(rng))));
        g.opacity_logit = logit(0.9);
        const double band = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * 2.0 * axial);
        g.color = forearm ? Vec3(0.15 + 0.2 * band, 0.45, 0.85 - 0.3 * axial)
                          : Vec3(0.85, 0.3 + 0.35 * axial, 0.2 + 0.2 * band);
        on_forearm_[i] = forearm ? 1 : 0;
    }
    cloud_ = GaussianCloud::from_gaussians(gs);
}

Intrinsics ArmScene::intrinsics() const {
    return {config_.focal, config_.focal, 0.5 * config_.width, 0.5 * config_.height, config_.width, config_.height};
}

double ArmScene::elbow_angle(double t) const { return config_.max_elbow_deg * kDeg * t; }

SplatSet ArmScene::posed(double t) const {
    SplatSet s = SplatSet::from_cloud(cloud_);
    const Mat3 r = Eigen::AngleAxisd(elbow_angle(t), Vec3::UnitZ()).toRotationMatrix();
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (on_forearm_[i] != 0) {
            s.means[i] = r * s.means[i];
            s.covariances[i] = r * s.covariances[i] * r.transpose();
        }
    }
    return s;
}

RenderOutput ArmScene::render(const Camera& camera, double t) const {
    return render_forward(posed(t), camera, Vec3::Zero());
}

double ArmScene::frame_time(std::size_t i) const {
    return config_.frames == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(config_.frames - 1);
}

Camera ArmScene::orbit_camera(double azimuth_deg, double elevation_deg) const {
    const double az = azimuth_deg * kDeg;
    const double el = elevation_deg * kDeg;
    const Vec3 eye = config_.distance * Vec3(std::cos(el) * std::sin(az), std::sin(el), -std::cos(el) * std::cos(az));
    return Camera::look_at(eye, Vec3::Zero(), Vec3::UnitY(), intrinsics());
}

Camera ArmScene::frame_camera(std::size_t i) const {
    const double az = config_.azimuth_min_deg + (config_.azimuth_max_deg - config_.azimuth_min_deg) * frame_time(i);
    return orbit_camera(az, config_.elevation_deg);
}

void write_arm_dataset(const ArmSceneConfig& config, const std::filesystem::path& dir) {
    const ArmScene scene(config);
    std::error_code ec;
    std::filesystem::create_directories(dir / "images", ec);
    std::filesystem::create_directories(dir / "masks", ec);
    std::filesystem::create_directories(dir / "held_out", ec);
    if (ec) {
        throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    }
    auto binarize = [](const Image& alpha) {
        Image m = alpha;
        for (double& v : m.data) {
            v = v > 0.5 ? 1.0 : 0.0;
        }
        return m;
    };
    const Intrinsics in = scene.intrinsics();
    json manifest;
    manifest["format"] = "bags-manifest";
    manifest["version"] = 1;
    manifest["intrinsics"] = {{"fx", in.fx}, {"fy", in.fy}, {"cx", in.cx}, {"cy", in.cy}, {"width", in.width},
                              {"height", in.height}};
    manifest["scene_extent"] = 1.0;
    manifest["scene_center"] = {0.0, 0.0, 0.0};
    manifest["background"] = {0.0, 0.0, 0.0};
    manifest["frames"] = json::array();
    manifest["held_out"] = json::array();
    char name[64];
    for (std::size_t i = 0; i < config.frames; ++i) {
        const double t = scene.frame_time(i);
        const Camera cam = scene.frame_camera(i);
        const RenderOutput out = scene.render(cam, t);
        std::snprintf(name, sizeof(name), "%04zu.png", i);
        save_png(dir / "images" / name, out.color);
        save_png(dir / "masks" / name, binarize(out.alpha));
        json f{{"image", std::string("images/") + name}, {"mask", std::string("masks/") + name},
               {"time", static_cast<double>(i)}};
        write_camera(f["camera"], cam);
        manifest["frames"].push_back(f);
        if (i % config.held_out_stride != 0) {
            continue;
        }
        for (double az : config.held_out_azimuths_deg) {
            const Camera hc = scene.orbit_camera(az, config.elevation_deg);
            const RenderOutput ho = scene.render(hc, t);
            std::snprintf(name, sizeof(name), "%04zu_az%03d.png", i, static_cast<int>(std::lround(az)));
            save_png(dir / "held_out" / name, ho.color);
            std::string mask_name = std::string("held_out/mask_") + name;
            save_png(dir / mask_name, binarize(ho.alpha));
            json h{{"image", std::string("held_out/") + name}, {"mask", mask_name}, {"time", static_cast<double>(i)}};
            write_camera(h["camera"], hc);
            manifest["held_out"].push_back(h);
        }
    }
    manifest["oracle"] = {{"generator", "two_bone_arm"}, {"config", config.to_json()}};
    write_file_atomic(dir / "manifest.json", manifest.dump(2));
}

} // namespace bags
