#include "bags/model_io.hpp"

#include "bags/error.hpp"
#include "bags/io_util.hpp"

#include <json.hpp>

#include <cmath>
#include <sstream>

namespace bags {

using nlohmann::json;

namespace {

constexpr std::string_view kCheckpointTag = "CKPT";
constexpr std::string_view kBundleTag = "VIEW";

void write_array(ByteWriter& w, const DenseArray& a) {
    w.u32(static_cast<std::uint32_t>(a.rank()));
    for (std::size_t d : a.shape()) {
        w.u64(d);
    }
    w.f64s(a.values());
}

DenseArray read_array(ByteReader& r) {
    const std::uint32_t rank = r.u32();
    if (rank > 8) {
        throw FormatError("checkpoint array has rank " + std::to_string(rank));
    }
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
        d = r.u64();
        if (d != 0 && count > r.remaining() / d) {
            throw FormatError("checkpoint array is larger than the file");
        }
        count *= d;
    }
    if (count > r.remaining() / sizeof(double)) {
        throw FormatError("checkpoint array is larger than the file");
    }
    return DenseArray::from_values(shape, r.f64s(count));
}

void write_vec3s(ByteWriter& w, const std::vector<Vec3>& v) {
    w.u64(v.size());
    for (const auto& x : v) {
        w.f64(x.x());
        w.f64(x.y());
        w.f64(x.z());
    }
}

std::vector<Vec3> read_vec3s(ByteReader& r) {
    const std::uint64_t n = r.u64();
    if (n > r.remaining() / (3 * sizeof(double))) {
        throw FormatError("checkpoint vector list is larger than the file");
    }
    std::vector<Vec3> v(n);
    for (auto& x : v) {
        x.x() = r.f64();
        x.y() = r.f64();
        x.z() = r.f64();
    }
    return v;
}

void write_doubles(ByteWriter& w, const std::vector<double>& v) {
    w.u64(v.size());
    w.f64s(v);
}

std::vector<double> read_doubles(ByteReader& r) {
    const std::uint64_t n = r.u64();
    if (n > r.remaining() / sizeof(double)) {
        throw FormatError("checkpoint list is larger than the file");
    }
    return r.f64s(n);
}

void write_mlp(ByteWriter& w, const Mlp& net) {
    w.string(to_string(net.activation()));
    w.u64(net.layers().size());
    for (const auto& layer : net.layers()) {
        write_array(w, layer.weight);
        write_array(w, layer.bias);
    }
}

Mlp read_mlp(ByteReader& r) {
    const Activation act = activation_from_string(r.string());
    const std::uint64_t n = r.u64();
    if (n == 0 || n > 64) {
        throw FormatError("checkpoint network has " + std::to_string(n) + " layers");
    }
    std::vector<DenseLayer> layers(n);
    for (auto& layer : layers) {
        layer.weight = read_array(r);
        layer.bias = read_array(r);
    }
    return Mlp::from_layers(std::move(layers), act);
}

void write_adam(ByteWriter& w, const AdamState& s) {
    w.f64(s.config.learning_rate);
    w.f64(s.config.beta1);
    w.f64(s.config.beta2);
    w.f64(s.config.epsilon);
    w.u64(s.step);
    write_doubles(w, s.first_moment);
    write_doubles(w, s.second_moment);
}

AdamState read_adam(ByteReader& r) {
    AdamState s;
    s.config.learning_rate = r.f64();
    s.config.beta1 = r.f64();
    s.config.beta2 = r.f64();
    s.config.epsilon = r.f64();
    s.step = r.u64();
    s.first_moment = read_doubles(r);
    s.second_moment = read_doubles(r);
    return s;
}

void write_adams(ByteWriter& w, const std::vector<AdamState>& v) {
    w.u64(v.size());
    for (const auto& s : v) {
        write_adam(w, s);
    }
}

std::vector<AdamState> read_adams(ByteReader& r) {
    const std::uint64_t n = r.u64();
    if (n > r.remaining()) {
        throw FormatError("checkpoint optimizer list is larger than the file");
    }
    std::vector<AdamState> v;
    for (std::uint64_t i = 0; i < n; ++i) {
        v.push_back(read_adam(r));
    }
    return v;
}

void write_vec3(ByteWriter& w, const Vec3& v) {
    w.f64(v.x());
    w.f64(v.y());
    w.f64(v.z());
}

Vec3 read_vec3(ByteReader& r) {
    const double x = r.f64();
    const double y = r.f64();
    const double z = r.f64();
    return Vec3(x, y, z);
}

void write_rig(ByteWriter& w, const BoneRig& rig) {
    const BoneRigConfig& c = rig.config();
    w.u64(c.bones);
    w.u64(c.frequencies);
    w.u64(c.hidden_width);
    w.u64(c.layers);
    w.string(to_string(c.activation));
    w.f64(c.final_scale);
    w.u64(c.seed);
    write_mlp(w, rig.center_net);
    write_mlp(w, rig.precision_net);
    write_mlp(w, rig.rotation_net);
    write_array(w, rig.canonical_embedding);
    write_vec3s(w, rig.center_offsets());
    write_vec3s(w, rig.log_precision_offsets());
}

BoneRig read_rig(ByteReader& r) {
    BoneRigConfig c;
    c.bones = r.u64();
    c.frequencies = r.u64();
    c.hidden_width = r.u64();
    c.layers = r.u64();
    c.activation = activation_from_string(r.string());
    c.final_scale = r.f64();
    c.seed = r.u64();
    Mlp center = read_mlp(r);
    Mlp precision = read_mlp(r);
    Mlp rotation = read_mlp(r);
    DenseArray embedding = read_array(r);
    auto offsets = read_vec3s(r);
    auto log_precision = read_vec3s(r);
    return BoneRig::from_parts(c, std::move(center), std::move(precision), std::move(rotation), std::move(embedding),
                               std::move(offsets), std::move(log_precision));
}

void write_cloud(ByteWriter& w, const GaussianCloud& cloud) {
    for (const DenseArray* p : cloud.parameters()) {
        write_array(w, *p);
    }
    const std::size_t n = cloud.size();
    const bool sized = cloud.view_grad_accum().size() == n;
    w.u64(n);
    for (std::size_t i = 0; i < n; ++i) {
        w.f64(sized ? cloud.view_grad_accum()[i] : 0.0);
        w.u32(sized ? cloud.view_grad_count()[i] : 0);
        write_vec3(w, sized ? cloud.position_grad_accum()[i] : Vec3::Zero());
    }
}

GaussianCloud read_cloud(ByteReader& r) {
    GaussianCloud cloud;
    for (DenseArray* p : cloud.parameters()) {
        *p = read_array(r);
    }
    const std::size_t n = cloud.size();
    const std::size_t widths[] = {3, 4, 3, 1, 3};
    const auto params = cloud.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k]->rows() != n || params[k]->row_width() != widths[k]) {
            throw FormatError("checkpoint splat arrays have inconsistent shapes");
        }
    }
    if (r.u64() != n) {
        throw FormatError("checkpoint densification statistics do not match the splat count");
    }
    std::vector<double> accum(n);
    std::vector<std::uint32_t> count(n);
    std::vector<Vec3> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
        accum[i] = r.f64();
        count[i] = r.u32();
        pos[i] = read_vec3(r);
    }
    cloud.restore_densify_stats(std::move(accum), std::move(count), std::move(pos));
    return cloud;
}

std::string rng_state(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

void check_container(ByteReader& r, std::string_view tag, std::uint32_t max_version, const char* what) {
    if (r.remaining() < 12) {
        throw FormatError(std::string(what) + " is truncated (" + std::to_string(r.remaining()) + " bytes)");
    }
    if (r.bytes(4) != kMagic) {
        throw FormatError(std::string(what) + ": bad magic, not a BAGS file");
    }
    const std::uint32_t version = r.u32();
    if (version == 0 || version > max_version) {
        throw FormatError(std::string(what) + ": unsupported version " + std::to_string(version) +
                          " (this build reads up to " + std::to_string(max_version) + ")");
    }
    if (r.bytes(4) != tag) {
        throw FormatError(std::string(what) + ": wrong container type, expected " + std::string(tag));
    }
}

} // namespace

std::string encode_checkpoint(const Checkpoint& c) {
    ByteWriter p;
    p.string(c.config.to_json().dump());
    const Intrinsics& in = c.scene.intrinsics;
    p.f64(in.fx);
    p.f64(in.fy);
    p.f64(in.cx);
    p.f64(in.cy);
    p.u32(static_cast<std::uint32_t>(in.width));
    p.u32(static_cast<std::uint32_t>(in.height));
    write_vec3(p, c.scene.center);
    p.f64(c.scene.extent);

    write_cloud(p, c.model.cloud);
    write_rig(p, c.model.rig);
    write_array(p, c.model.root_rotations);
    write_array(p, c.model.root_translations);
    write_doubles(p, c.model.frame_times);
    write_vec3(p, c.model.background);

    const TrainState& s = c.state;
    p.string(to_string(s.stage));
    p.u64(s.iteration);
    p.u64(s.reference_frame);
    p.u64(s.active_frames.size());
    for (std::size_t f : s.active_frames) {
        p.u64(f);
    }
    write_adams(p, s.cloud_optim);
    write_adams(p, s.rig_optim);
    write_adams(p, s.root_optim);
    p.string(rng_state(s.rng));
    p.u64(s.history.size());
    for (const auto& h : s.history) {
        p.string(h.dump());
    }

    const std::string payload = p.take();
    ByteWriter out;
    out.bytes(kMagic);
    out.u32(kCheckpointVersion);
    out.bytes(kCheckpointTag);
    out.u64(payload.size());
    out.bytes(payload);
    out.u32(crc32_of(payload));
    return out.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    ByteReader head(bytes);
    check_container(head, kCheckpointTag, kCheckpointVersion, "checkpoint");
    if (head.remaining() < 8) {
        throw FormatError("checkpoint checksum error: file is truncated");
    }
    const std::uint64_t length = head.u64();
    if (head.remaining() < 4 || length != head.remaining() - 4) {
        throw FormatError("checkpoint checksum error: payload length " + std::to_string(length) + " does not match " +
                          std::to_string(head.remaining() < 4 ? 0 : head.remaining() - 4) +
                          " bytes present (truncated or corrupt)");
    }
    const std::string_view payload = head.bytes(length);
    const std::uint32_t stored = head.u32();
    if (crc32_of(payload) != stored) {
        throw FormatError("checkpoint checksum error: CRC-32 mismatch");
    }

    ByteReader r(payload);
    Checkpoint c;
    try {
        c.config = TrainConfig::from_json(json::parse(r.string()));
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    Intrinsics& in = c.scene.intrinsics;
    in.fx = r.f64();
    in.fy = r.f64();
    in.cx = r.f64();
    in.cy = r.f64();
    in.width = static_cast<int>(r.u32());
    in.height = static_cast<int>(r.u32());
    c.scene.center = read_vec3(r);
    c.scene.extent = r.f64();

    c.model.cloud = read_cloud(r);
    c.model.rig = read_rig(r);
    c.model.root_rotations = read_array(r);
    c.model.root_translations = read_array(r);
    c.model.frame_times = read_doubles(r);
    c.model.background = read_vec3(r);
    const std::size_t frames = c.model.frame_times.size();
    if (c.model.root_rotations.rows() != frames || c.model.root_rotations.row_width() != 4 ||
        c.model.root_translations.rows() != frames || c.model.root_translations.row_width() != 3) {
        throw FormatError("checkpoint root transforms do not match the frame count");
    }

    TrainState& s = c.state;
    s.stage = stage_from_string(r.string());
    s.iteration = r.u64();
    s.reference_frame = r.u64();
    const std::uint64_t active = r.u64();
    if (active > frames) {
        throw FormatError("checkpoint lists more active frames than frames");
    }
    for (std::uint64_t i = 0; i < active; ++i) {
        s.active_frames.push_back(r.u64());
    }
    s.cloud_optim = read_adams(r);
    s.rig_optim = read_adams(r);
    s.root_optim = read_adams(r);
    std::istringstream rng(r.string());
    rng >> s.rng;
    if (!rng) {
        throw FormatError("checkpoint RNG state is unreadable");
    }
    const std::uint64_t history = r.u64();
    for (std::uint64_t i = 0; i < history; ++i) {
        try {
            s.history.push_back(json::parse(r.string()));
        } catch (const json::exception& e) {
            throw FormatError(std::string("checkpoint history entry is not valid JSON: ") + e.what());
        }
    }
    if (r.remaining() != 0) {
        throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
    }
    return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    write_file_atomic(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError("checkpoint not found: " + path.string());
    }
    try {
        return decode_checkpoint(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

ViewerBundle make_viewer_bundle(const Model& model) {
    const std::size_t n = model.cloud.size();
    const std::size_t nb = model.rig.bone_count();
    if (nb == 0) {
        throw StateError("cannot export a model without bones");
    }
    ViewerBundle b;
    b.splats = static_cast<std::uint32_t>(n);
    b.bones = static_cast<std::uint32_t>(nb);
    const BonePose canonical = canonical_bone_pose(model.rig);
    for (std::size_t i = 0; i < n; ++i) {
        const Gaussian g = model.cloud.get(i);
        const Vec4 q = quat_normalized(g.rotation);
        for (int k = 0; k < 3; ++k) {
            b.positions.push_back(static_cast<float>(g.position[k]));
            b.scales.push_back(static_cast<float>(std::exp(g.log_scale[k])));
            b.colors.push_back(static_cast<float>(g.color[k]));
        }
        for (int k = 0; k < 4; ++k) {
            b.quaternions.push_back(static_cast<float>(q[k]));
        }
        b.opacities.push_back(static_cast<float>(sigmoid(g.opacity_logit)));
        for (double w : skinning_weights(g.position, canonical)) {
            b.weights.push_back(static_cast<float>(w));
        }
    }
    for (std::size_t k = 0; k < nb; ++k) {
        const Vec4 q = quat_normalized(canonical.quaternions[k]);
        for (int c = 0; c < 3; ++c) {
            b.bone_centers.push_back(static_cast<float>(canonical.centers[k][c]));
            b.bone_precision.push_back(static_cast<float>(canonical.precision[k][c]));
        }
        for (int c = 0; c < 4; ++c) {
            b.bone_rotations.push_back(static_cast<float>(q[c]));
        }
    }
    return b;
}

namespace {

void put_floats(ByteWriter& w, const std::vector<float>& v, std::size_t expected, const char* name) {
    if (v.size() != expected) {
        throw DimensionError(std::string("viewer bundle array ") + name + " has " + std::to_string(v.size()) +
                             " entries, expected " + std::to_string(expected));
    }
    for (float x : v) {
        w.f32(x);
    }
}

std::vector<float> get_floats(ByteReader& r, std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) {
        x = r.f32();
    }
    return v;
}

std::size_t bundle_floats(std::size_t n, std::size_t b) { return n * (3 + 4 + 3 + 1 + 3 + b) + b * (3 + 4 + 3); }

} // namespace

std::string encode_viewer_bundle(const ViewerBundle& b) {
    const std::size_t n = b.splats;
    const std::size_t nb = b.bones;
    ByteWriter w;
    w.bytes(kMagic);
    w.u32(kBundleVersion);
    w.bytes(kBundleTag);
    w.u32(b.splats);
    w.u32(b.bones);
    put_floats(w, b.positions, n * 3, "positions");
    put_floats(w, b.quaternions, n * 4, "quaternions");
    put_floats(w, b.scales, n * 3, "scales");
    put_floats(w, b.opacities, n, "opacities");
    put_floats(w, b.colors, n * 3, "colors");
    put_floats(w, b.weights, n * nb, "weights");
    put_floats(w, b.bone_centers, nb * 3, "bone_centers");
    put_floats(w, b.bone_rotations, nb * 4, "bone_rotations");
    put_floats(w, b.bone_precision, nb * 3, "bone_precision");
    return w.take();
}

ViewerBundle decode_viewer_bundle(std::string_view bytes) {
    ByteReader r(bytes);
    check_container(r, kBundleTag, kBundleVersion, "viewer bundle");
    if (r.remaining() < 8) {
        throw FormatError("viewer bundle is truncated");
    }
    ViewerBundle b;
    b.splats = r.u32();
    b.bones = r.u32();
    const std::size_t n = b.splats;
    const std::size_t nb = b.bones;
    if (r.remaining() != 4 * bundle_floats(n, nb)) {
        throw FormatError("viewer bundle size mismatch: header says " + std::to_string(n) + " splats and " +
                          std::to_string(nb) + " bones, body has " + std::to_string(r.remaining()) + " bytes");
    }
    b.positions = get_floats(r, n * 3);
    b.quaternions = get_floats(r, n * 4);
    b.scales = get_floats(r, n * 3);
    b.opacities = get_floats(r, n);
    b.colors = get_floats(r, n * 3);
    b.weights = get_floats(r, n * nb);
    b.bone_centers = get_floats(r, nb * 3);
    b.bone_rotations = get_floats(r, nb * 4);
    b.bone_precision = get_floats(r, nb * 3);
    return b;
}

void export_viewer_bundle(const Model& model, const SceneInfo& scene, const std::filesystem::path& path) {
    const ViewerBundle b = make_viewer_bundle(model);
    write_file_atomic(path, encode_viewer_bundle(b));
    const std::size_t n = b.splats;
    const std::size_t nb = b.bones;
    json arrays = json::array();
    std::size_t offset = 20;
    auto entry = [&](const char* name, std::size_t rows, std::size_t width) {
        arrays.push_back({{"name", name}, {"offset", offset}, {"rows", rows}, {"components", width}});
        offset += 4 * rows * width;
    };
    entry("positions", n, 3);
    entry("quaternions", n, 4);
    entry("scales", n, 3);
    entry("opacities", n, 1);
    entry("colors", n, 3);
    entry("weights", n, nb);
    entry("bone_centers", nb, 3);
    entry("bone_rotations", nb, 4);
    entry("bone_precision", nb, 3);
    const Intrinsics& in = scene.intrinsics;
    json meta{{"format", "bags-viewer-bundle"},
              {"version", kBundleVersion},
              {"splats", n},
              {"bones", nb},
              {"byte_length", offset},
              {"arrays", arrays},
              {"background", {model.background.x(), model.background.y(), model.background.z()}},
              {"scene_center", {scene.center.x(), scene.center.y(), scene.center.z()}},
              {"scene_extent", scene.extent},
              {"intrinsics",
               {{"fx", in.fx}, {"fy", in.fy}, {"cx", in.cx}, {"cy", in.cy}, {"width", in.width}, {"height", in.height}}},
              {"frame_times", model.frame_times}};
    std::filesystem::path sidecar = path;
    sidecar.replace_extension(".json");
    write_file_atomic(sidecar, meta.dump(2));
}

PoseFile parse_pose_file(const json& j) {
    if (!j.is_object() || !j.contains("keyframes") || !j["keyframes"].is_array() || !j.contains("bones")) {
        throw FormatError("pose file needs an object with 'bones' and a 'keyframes' list");
    }
    if (j.contains("format") && j["format"] != "bags-pose") {
        throw FormatError("pose file format must be 'bags-pose'");
    }
    PoseFile p;
    try {
        p.bones = j["bones"].get<std::size_t>();
        for (const auto& k : j["keyframes"]) {
            PoseKeyframe kf;
            kf.time = k.at("time").get<double>();
            kf.bones.assign(p.bones, BoneOverride{});
            for (const auto& o : k.value("overrides", json::array())) {
                const auto index = o.at("bone").get<std::int64_t>();
                if (index < 0 || static_cast<std::size_t>(index) >= p.bones) {
                    throw ConfigError("pose override addresses bone " + std::to_string(index) + " of " +
                                      std::to_string(p.bones));
                }
                BoneOverride& b = kf.bones[static_cast<std::size_t>(index)];
                if (o.contains("rotation")) {
                    const auto q = o["rotation"].get<std::vector<double>>();
                    if (q.size() != 4) {
                        throw FormatError("pose rotation needs 4 numbers (w, x, y, z)");
                    }
                    b.rotation = Vec4(q[0], q[1], q[2], q[3]);
                    if (!(b.rotation.norm() > 1e-12) || !all_finite(std::span<const double>(q))) {
                        throw ConfigError("pose rotation for bone " + std::to_string(index) + " is degenerate");
                    }
                    b.rotation = quat_normalized(b.rotation);
                }
                if (o.contains("translation")) {
                    const auto t = o["translation"].get<std::vector<double>>();
                    if (t.size() != 3 || !all_finite(std::span<const double>(t))) {
                        throw FormatError("pose translation needs 3 finite numbers");
                    }
                    b.translation = Vec3(t[0], t[1], t[2]);
                }
            }
            if (!p.keyframes.empty() && !(kf.time > p.keyframes.back().time)) {
                throw ConfigError("pose keyframe times must increase strictly");
            }
            p.keyframes.push_back(std::move(kf));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("pose file: ") + e.what());
    }
    if (p.keyframes.empty()) {
        throw ConfigError("pose file has no keyframes");
    }
    return p;
}

PoseFile load_pose_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError("pose file not found: " + path.string());
    }
    try {
        return parse_pose_file(json::parse(read_file(path)));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + " is not valid JSON: " + e.what());
    }
}

json pose_file_to_json(const PoseFile& pose) {
    json frames = json::array();
    for (const auto& k : pose.keyframes) {
        json overrides = json::array();
        for (std::size_t b = 0; b < k.bones.size(); ++b) {
            const auto& o = k.bones[b];
            overrides.push_back({{"bone", b},
                                 {"rotation", {o.rotation[0], o.rotation[1], o.rotation[2], o.rotation[3]}},
                                 {"translation", {o.translation.x(), o.translation.y(), o.translation.z()}}});
        }
        frames.push_back({{"time", k.time}, {"overrides", overrides}});
    }
    return {{"format", "bags-pose"}, {"version", 1}, {"bones", pose.bones}, {"keyframes", frames}};
}

std::vector<BoneOverride> interpolate_pose(const PoseFile& pose, double time) {
    const auto& ks = pose.keyframes;
    if (ks.empty()) {
        throw ConfigError("pose file has no keyframes");
    }
    if (time <= ks.front().time) {
        return ks.front().bones;
    }
    if (time >= ks.back().time) {
        return ks.back().bones;
    }
    std::size_t k = 1;
    while (ks[k].time < time) {
        ++k;
    }
    const PoseKeyframe& a = ks[k - 1];
    const PoseKeyframe& b = ks[k];
    const double u = (time - a.time) / (b.time - a.time);
    std::vector<BoneOverride> out(pose.bones);
    for (std::size_t i = 0; i < pose.bones; ++i) {
        out[i].rotation = quat_slerp(a.bones[i].rotation, b.bones[i].rotation, u);
        out[i].translation = (1.0 - u) * a.bones[i].translation + u * b.bones[i].translation;
    }
    return out;
}

std::vector<RigidTransform> override_deltas(const BonePose& canonical, std::span<const BoneOverride> bones) {
    if (bones.size() != canonical.size()) {
        throw DimensionError("pose has " + std::to_string(bones.size()) + " bones, model has " +
                             std::to_string(canonical.size()));
    }
    std::vector<RigidTransform> deltas(bones.size());
    for (std::size_t b = 0; b < bones.size(); ++b) {
        const Mat3 r = quat_to_rotation(bones[b].rotation);
        const Vec3& c = canonical.centers[b];
        deltas[b].rotation = r;
        deltas[b].translation = c - r * c + bones[b].translation;
    }
    return deltas;
}

} // namespace bags
