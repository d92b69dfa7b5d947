#include "bags/cli.hpp"

#include "bags/dataset.hpp"
#include "bags/image.hpp"
#include "bags/io_util.hpp"
#include "bags/model_io.hpp"
#include "bags/parallel.hpp"
#include "bags/prior.hpp"
#include "bags/synthetic.hpp"
#include "bags/trainer.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <ostream>
#include <regex>

namespace bags {

using nlohmann::json;

int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Config:
        return kExitConfig;
    case ErrorKind::Io:
        return kExitIo;
    case ErrorKind::Format:
        return kExitFormat;
    case ErrorKind::Dimension:
        return kExitDimension;
    case ErrorKind::Numeric:
        return kExitNumeric;
    case ErrorKind::State:
        return kExitState;
    }
    return kExitUnknown;
}

namespace {

json toml_scalar(const std::string& text) {
    if (text == "true" || text == "false") {
        return text == "true";
    }
    static const std::regex number(R"([+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?)");
    if (std::regex_match(text, number)) {
        return json::parse(text);
    }
    return text;
}

} // namespace

json load_toml(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError("config file not found: " + path.string());
    }
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_file(path.string());
    } catch (const CLI::Error& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
    json root = json::object();
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") {
            continue;
        }
        json* node = &root;
        for (const auto& parent : item.parents) {
            node = &(*node)[parent];
        }
        if (item.inputs.size() == 1) {
            (*node)[item.name] = toml_scalar(item.inputs.front());
        } else {
            json arr = json::array();
            for (const auto& v : item.inputs) {
                arr.push_back(toml_scalar(v));
            }
            (*node)[item.name] = arr;
        }
    }
    return root;
}

json BenchReport::to_json() const {
    return {{"splats", splats},         {"width", width},           {"height", height},
            {"threads", threads},       {"iterations", iterations}, {"mean_fps", mean_fps},
            {"median_fps", median_fps}, {"mean_ms", mean_ms}};
}

BenchReport bench_render(const SplatSet& splats, const Camera& camera, const Vec3& background,
                         std::size_t iterations) {
    if (iterations == 0) {
        throw ConfigError("bench needs at least one iteration");
    }
    render_forward(splats, camera, background);
    std::vector<double> seconds;
    for (std::size_t i = 0; i < iterations; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        render_forward(splats, camera, background);
        seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    double total = 0.0;
    for (double s : seconds) {
        total += s;
    }
    std::sort(seconds.begin(), seconds.end());
    const std::size_t n = seconds.size();
    const double median = n % 2 == 1 ? seconds[n / 2] : 0.5 * (seconds[n / 2 - 1] + seconds[n / 2]);
    BenchReport r;
    r.splats = splats.size();
    r.width = camera.intrinsics.width;
    r.height = camera.intrinsics.height;
    r.threads = thread_count();
    r.iterations = iterations;
    r.mean_ms = 1000.0 * total / static_cast<double>(n);
    r.mean_fps = static_cast<double>(n) / total;
    r.median_fps = 1.0 / median;
    return r;
}

namespace {

struct Options {
    std::string manifest;
    std::string checkpoint;
    std::string out;
    std::string config;
    std::string prior = "oracle";
    std::string resolution;
    std::string pose;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
    int orbit = 0;
    int frame = -1;
    int frames = 24;
    int splats = 2000;
    std::size_t iterations = 100;
    std::size_t checkpoint_every = 0;
    double time = 0.5;
    double azimuth = 0.0;
    double elevation = 20.0;
    double radius = 2.6;
};

void setup_logging() {
    auto logger = spdlog::get("bags");
    if (!logger) {
        logger = spdlog::stderr_color_mt("bags");
    }
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::info);
    if (const char* level = std::getenv("BAGS_LOG")) {
        spdlog::set_level(spdlog::level::from_str(level));
    }
}

Intrinsics scaled_intrinsics(const Intrinsics& base, const std::string& resolution) {
    if (resolution.empty()) {
        return base;
    }
    static const std::regex wxh(R"((\d+)[xX](\d+))");
    std::smatch m;
    if (!std::regex_match(resolution, m, wxh)) {
        throw ConfigError("--resolution must look like WxH, got '" + resolution + "'");
    }
    const int w = std::stoi(m[1]);
    const int h = std::stoi(m[2]);
    if (w <= 0 || h <= 0) {
        throw ConfigError("--resolution must be positive");
    }
    Intrinsics in = base;
    const double sx = static_cast<double>(w) / base.width;
    const double sy = static_cast<double>(h) / base.height;
    in.fx *= sx;
    in.fy *= sy;
    in.cx *= sx;
    in.cy *= sy;
    in.width = w;
    in.height = h;
    return in;
}

Camera orbit_camera(const SceneInfo& scene, const Intrinsics& in, double azimuth_deg, double elevation_deg,
                    double radius) {
    constexpr double deg = std::numbers::pi / 180.0;
    const double az = azimuth_deg * deg;
    const double el = std::clamp(elevation_deg, -89.0, 89.0) * deg;
    const Vec3 eye = scene.center + radius * scene.extent *
                                        Vec3(std::cos(el) * std::sin(az), std::sin(el), -std::cos(el) * std::cos(az));
    return Camera::look_at(eye, scene.center, Vec3::UnitY(), in);
}

double clamp_time(const Model& model, double t) {
    const double lo = model.frame_times.empty() ? 0.0 : model.frame_times.front();
    const double hi = model.frame_times.empty() ? 1.0 : model.frame_times.back();
    if (t < lo || t > hi) {
        const double c = std::clamp(t, lo, hi);
        spdlog::warn("time {} is outside the trained range [{}, {}]; clamped to {}", t, lo, hi, c);
        return c;
    }
    return t;
}

std::filesystem::path numbered(const std::filesystem::path& dir, const char* stem, std::size_t i) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%04zu.png", stem, i);
    return dir / name;
}

void make_dirs(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    }
}

void require(const std::string& value, const char* flag, const char* command) {
    if (value.empty()) {
        throw ConfigError(std::string(command) + " needs " + flag);
    }
}

int cmd_train(const Options& o, std::ostream& out) {
    require(o.manifest, "--manifest", "train");
    const Dataset ds = load_dataset(o.manifest);
    const std::filesystem::path dir = o.out.empty() ? "out" : o.out;
    make_dirs(dir);
    auto prior = make_prior(o.prior, ds.oracle);
    SceneInfo scene{ds.intrinsics, ds.scene_center, ds.scene_extent};

    std::unique_ptr<Trainer> trainer;
    if (!o.checkpoint.empty()) {
        Checkpoint ck = load_checkpoint(o.checkpoint);
        spdlog::info("resuming from {} ({} stage, iteration {})", o.checkpoint, to_string(ck.state.stage),
                     ck.state.iteration);
        trainer = std::make_unique<Trainer>(ck.config, ds, *prior, std::move(ck.model), std::move(ck.state));
    } else {
        TrainConfig config;
        if (!o.config.empty()) {
            config = TrainConfig::from_json(load_toml(o.config), config);
        }
        if (o.seed_set) {
            config.seed = o.seed;
        }
        trainer = std::make_unique<Trainer>(config, ds, *prior);
    }

    std::ofstream metrics(dir / "metrics.jsonl", std::ios::app);
    if (!metrics) {
        throw IoError("cannot open " + (dir / "metrics.jsonl").string());
    }
    trainer->metrics_sink = [&](const json& j) {
        metrics << j.dump() << '\n';
        metrics.flush();
        spdlog::info("{} {}: psnr {:.2f} iou {:.3f} rigid {:.4f}", j["stage"].get<std::string>(),
                     j["iteration"].get<std::size_t>(), j.value("psnr", 0.0), j.value("iou", 0.0),
                     j.value("rigid", 0.0));
    };
    const TrainConfig config = trainer->config();
    auto snapshot = [&](const Model& m, const TrainState& s) { return Checkpoint{config, scene, m, s}; };
    trainer->divergence_dump = [&](const Model& m, const TrainState& s) {
        save_checkpoint(snapshot(m, s), dir / "diverged.bags");
        spdlog::error("divergence snapshot written to {}", (dir / "diverged.bags").string());
    };

    std::size_t steps = 0;
    while (trainer->state().stage != Stage::Done) {
        trainer->step();
        ++steps;
        if (o.checkpoint_every > 0 && steps % o.checkpoint_every == 0) {
            save_checkpoint(snapshot(trainer->model(), trainer->state()), dir / "checkpoint.bags");
        }
    }
    save_checkpoint(snapshot(trainer->model(), trainer->state()), dir / "checkpoint.bags");
    const json final_metrics = evaluate(trainer->model(), ds).to_json();
    write_file_atomic(dir / "final_metrics.json", final_metrics.dump(2));
    out << final_metrics.dump() << '\n';
    return kExitOk;
}

void render_to(const Model& model, double t, const Camera& camera, const std::filesystem::path& path) {
    save_png(path, render_model(model, t, camera).color);
}

int cmd_render(const Options& o, std::ostream& out) {
    require(o.checkpoint, "--checkpoint", "render");
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const Model& model = ck.model;
    if (o.frame >= 0) {
        require(o.manifest, "--manifest (for --frame)", "render");
        const Dataset ds = load_dataset(o.manifest);
        if (static_cast<std::size_t>(o.frame) >= ds.frames.size() || ds.frames.size() != model.frame_count()) {
            throw ConfigError("--frame " + std::to_string(o.frame) + " is not a frame of this model");
        }
        Camera cam = ds.frames[o.frame].camera;
        cam.intrinsics = scaled_intrinsics(cam.intrinsics, o.resolution);
        const PosedSplats posed = pose_model_frame(model, static_cast<std::size_t>(o.frame));
        const std::filesystem::path path = o.out.empty() ? "render.png" : o.out;
        save_png(path, render_forward(posed.world, cam, model.background).color);
        out << path.string() << '\n';
        return kExitOk;
    }
    const double t = clamp_time(model, o.time);
    const Intrinsics in = scaled_intrinsics(ck.scene.intrinsics, o.resolution);
    if (o.orbit > 0) {
        const std::filesystem::path dir = o.out.empty() ? "orbit" : o.out;
        make_dirs(dir);
        for (int i = 0; i < o.orbit; ++i) {
            const double az = o.azimuth + 360.0 * i / o.orbit;
            const auto path = numbered(dir, "orbit", static_cast<std::size_t>(i));
            render_to(model, t, orbit_camera(ck.scene, in, az, o.elevation, o.radius), path);
            out << path.string() << '\n';
        }
        return kExitOk;
    }
    const std::filesystem::path path = o.out.empty() ? "render.png" : o.out;
    render_to(model, t, orbit_camera(ck.scene, in, o.azimuth, o.elevation, o.radius), path);
    out << path.string() << '\n';
    return kExitOk;
}

int cmd_animate(const Options& o, std::ostream& out) {
    require(o.checkpoint, "--checkpoint", "animate");
    require(o.pose, "--pose", "animate");
    if (o.frames < 1) {
        throw ConfigError("--frames must be positive");
    }
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const PoseFile pose = load_pose_file(o.pose);
    const BonePose canonical = canonical_bone_pose(ck.model.rig);
    if (pose.bones != canonical.size()) {
        throw DimensionError("pose file has " + std::to_string(pose.bones) + " bones, model has " +
                             std::to_string(canonical.size()));
    }
    const Camera cam =
        orbit_camera(ck.scene, scaled_intrinsics(ck.scene.intrinsics, o.resolution), o.azimuth, o.elevation, o.radius);
    const std::filesystem::path dir = o.out.empty() ? "animation" : o.out;
    make_dirs(dir);
    const double t0 = pose.keyframes.front().time;
    const double t1 = pose.keyframes.back().time;
    for (int i = 0; i < o.frames; ++i) {
        const double u = o.frames == 1 ? 0.0 : static_cast<double>(i) / (o.frames - 1);
        const auto overrides = interpolate_pose(pose, t0 + (t1 - t0) * u);
        const auto deltas = override_deltas(canonical, overrides);
        const PosedSplats posed = pose_cloud(ck.model.cloud, canonical, deltas, RigidTransform{});
        const auto path = numbered(dir, "frame", static_cast<std::size_t>(i));
        save_png(path, render_forward(posed.world, cam, ck.model.background).color);
        out << path.string() << '\n';
    }
    return kExitOk;
}

int cmd_export(const Options& o, std::ostream& out) {
    require(o.checkpoint, "--checkpoint", "export");
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const std::filesystem::path path = o.out.empty() ? "model.bags" : o.out;
    if (path.has_parent_path()) {
        make_dirs(path.parent_path());
    }
    export_viewer_bundle(ck.model, ck.scene, path);
    out << path.string() << '\n';
    return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
    require(o.checkpoint, "--checkpoint", "eval");
    require(o.manifest, "--manifest", "eval");
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const Dataset ds = load_dataset(o.manifest);
    const json m = evaluate(ck.model, ds).to_json();
    if (!o.out.empty()) {
        write_file_atomic(o.out, m.dump(2));
    }
    out << m.dump() << '\n';
    return kExitOk;
}

int cmd_bench(const Options& o, std::ostream& out) {
    require(o.checkpoint, "--checkpoint", "bench");
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const Camera cam =
        orbit_camera(ck.scene, scaled_intrinsics(ck.scene.intrinsics, o.resolution), o.azimuth, o.elevation, o.radius);
    const PosedSplats posed = pose_model(ck.model, clamp_time(ck.model, o.time));
    const BenchReport r = bench_render(posed.world, cam, ck.model.background, o.iterations);
    out << r.to_json().dump() << '\n';
    return kExitOk;
}

int cmd_synth(const Options& o, std::ostream& out) {
    ArmSceneConfig c;
    if (!o.resolution.empty()) {
        const Intrinsics in = scaled_intrinsics(Intrinsics{c.focal, c.focal, 0.5 * c.width, 0.5 * c.height,
                                                           c.width, c.height},
                                                o.resolution);
        c.width = in.width;
        c.height = in.height;
        c.focal = in.fx;
    }
    c.frames = static_cast<std::size_t>(std::max(1, o.frames));
    c.splats = static_cast<std::size_t>(std::max(2, o.splats));
    if (o.seed_set) {
        c.seed = o.seed;
    }
    const std::filesystem::path dir = o.out.empty() ? "arm" : o.out;
    write_arm_dataset(c, dir);
    out << (dir / "manifest.json").string() << '\n';
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    setup_logging();
    CLI::App app{"Articulated Gaussian splatting from monocular video"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--threads", o.threads, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
        sub->add_option("--out", o.out, "output file or directory");
    };
    auto camera = [&](CLI::App* sub) {
        sub->add_option("--resolution", o.resolution, "output size WxH");
        sub->add_option("--azimuth", o.azimuth, "camera azimuth in degrees");
        sub->add_option("--elevation", o.elevation, "camera elevation in degrees");
        sub->add_option("--radius", o.radius, "camera distance in scene extents");
        sub->add_option("--time", o.time, "normalized time in [0, 1]");
    };
    auto seed = [&](CLI::App* sub) {
        sub->add_option_function<std::uint64_t>(
            "--seed",
            [&](const std::uint64_t& v) {
                o.seed = v;
                o.seed_set = true;
            },
            "random seed");
    };

    auto* train = app.add_subcommand("train", "run warm-up and joint training");
    common(train);
    seed(train);
    train->add_option("--manifest", o.manifest, "dataset manifest JSON")->required();
    train->add_option("--config", o.config, "TOML overrides of the training config");
    train->add_option("--prior", o.prior, "zero | noise | oracle | remote:URL");
    train->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");
    train->add_option("--checkpoint-every", o.checkpoint_every, "write a checkpoint every N steps");

    auto* render = app.add_subcommand("render", "render a trained model");
    common(render);
    camera(render);
    render->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
    render->add_option("--manifest", o.manifest, "dataset manifest (for --frame)");
    render->add_option("--frame", o.frame, "render a training frame's camera and time");
    render->add_option("--orbit", o.orbit, "render N views on an azimuth circle")->check(CLI::NonNegativeNumber);

    auto* animate = app.add_subcommand("animate", "render the canonical model under bone overrides");
    common(animate);
    camera(animate);
    animate->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
    animate->add_option("--pose", o.pose, "pose keyframe JSON")->required();
    animate->add_option("--frames", o.frames, "output frames");

    auto* exporter = app.add_subcommand("export", "write the viewer bundle");
    common(exporter);
    exporter->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();

    auto* eval = app.add_subcommand("eval", "report metrics against a dataset");
    common(eval);
    eval->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
    eval->add_option("--manifest", o.manifest, "dataset manifest JSON")->required();

    auto* bench = app.add_subcommand("bench", "time forward rendering");
    common(bench);
    camera(bench);
    bench->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
    bench->add_option("--iterations", o.iterations, "timed renders");

    auto* synth = app.add_subcommand("synth", "write the synthetic two-bone arm dataset");
    common(synth);
    seed(synth);
    synth->add_option("--resolution", o.resolution, "image size WxH");
    synth->add_option("--frames", o.frames, "frame count")->default_val(20);
    synth->add_option("--splats", o.splats, "ground-truth splats");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << e.what() << '\n';
        return kExitConfig;
    }

    try {
        set_thread_count(o.threads);
        if (train->parsed()) {
            return cmd_train(o, out);
        }
        if (render->parsed()) {
            return cmd_render(o, out);
        }
        if (animate->parsed()) {
            return cmd_animate(o, out);
        }
        if (exporter->parsed()) {
            return cmd_export(o, out);
        }
        if (eval->parsed()) {
            return cmd_eval(o, out);
        }
        if (bench->parsed()) {
            return cmd_bench(o, out);
        }
        if (synth->parsed()) {
            return cmd_synth(o, out);
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitUnknown;
    }
    return kExitUnknown;
}

} // namespace bags
