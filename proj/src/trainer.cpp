#include "bags/trainer.hpp"

#include "bags/error.hpp"
#include "bags/renderer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace bags {

using nlohmann::json;

std::string to_string(Stage s) {
    switch (s) {
    case Stage::Warmup:
        return "warmup";
    case Stage::Joint:
        return "joint";
    case Stage::Done:
        return "done";
    }
    return "unknown";
}

Stage stage_from_string(const std::string& s) {
    if (s == "warmup") {
        return Stage::Warmup;
    }
    if (s == "joint") {
        return Stage::Joint;
    }
    if (s == "done") {
        return Stage::Done;
    }
    throw FormatError("unknown training stage '" + s + "'");
}

void TrainConfig::validate() const {
    weights.validate();
    for (double tau : {warmup_tau_start, warmup_tau_end, joint_tau_start, joint_tau_end}) {
        if (!(tau > 0.0 && tau < 1.0)) {
            throw ConfigError("tau endpoints must lie in (0, 1)");
        }
    }
    if (warmup_tau_end > warmup_tau_start || joint_tau_end > joint_tau_start) {
        throw ConfigError("tau schedules must be non-increasing");
    }
    if (curriculum_interval == 0) {
        throw ConfigError("curriculum_interval must be positive");
    }
    const LearningRates& l = lr;
    for (double v : {l.position, l.position_final, l.rotation, l.scale, l.opacity, l.color, l.rig, l.rig_final, l.root}) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ConfigError("learning rates must be finite and non-negative");
        }
    }
    const SdsCameraConfig& s = sds_camera;
    if (!(s.radius_min > 0.0) || s.radius_max < s.radius_min || s.elevation_max_deg < s.elevation_min_deg ||
        s.azimuth_max_deg < s.azimuth_min_deg || s.elevation_min_deg < -90.0 || s.elevation_max_deg > 90.0) {
        throw ConfigError("SDS camera bands must be ordered, with positive radius and |elevation| <= 90");
    }
    if (initial_splats == 0 || max_splats == 0) {
        throw ConfigError("splat counts must be positive");
    }
    if (!(initial_opacity > 0.0 && initial_opacity < 1.0)) {
        throw ConfigError("initial_opacity must lie in (0, 1)");
    }
    rig.validate();
}

json TrainConfig::to_json() const {
    return {
        {"warmup_iterations", warmup_iterations},
        {"joint_iterations", joint_iterations},
        {"weights",
         {{"sds", weights.sds},
          {"rigid", weights.rigid},
          {"perceptual", weights.perceptual},
          {"l1", weights.l1},
          {"mask", weights.mask}}},
        {"warmup_tau_start", warmup_tau_start},
        {"warmup_tau_end", warmup_tau_end},
        {"joint_tau_start", joint_tau_start},
        {"joint_tau_end", joint_tau_end},
        {"curriculum_radius", curriculum_radius},
        {"curriculum_frames_per_interval", curriculum_frames_per_interval},
        {"curriculum_interval", curriculum_interval},
        {"lr",
         {{"position", lr.position},
          {"position_final", lr.position_final},
          {"rotation", lr.rotation},
          {"scale", lr.scale},
          {"opacity", lr.opacity},
          {"color", lr.color},
          {"rig", lr.rig},
          {"rig_final", lr.rig_final},
          {"rig_ramp", lr.rig_ramp},
          {"root", lr.root}}},
        {"densify_interval", densify_interval},
        {"densify_until", densify_until},
        {"max_splats", max_splats},
        {"densify",
         {{"grad_threshold", densify.grad_threshold},
          {"split_scale_fraction", densify.split_scale_fraction},
          {"prune_opacity", densify.prune_opacity},
          {"split_shrink", densify.split_shrink}}},
        {"sds_camera",
         {{"radius_min", sds_camera.radius_min},
          {"radius_max", sds_camera.radius_max},
          {"elevation_min_deg", sds_camera.elevation_min_deg},
          {"elevation_max_deg", sds_camera.elevation_max_deg},
          {"azimuth_min_deg", sds_camera.azimuth_min_deg},
          {"azimuth_max_deg", sds_camera.azimuth_max_deg}}},
        {"rig",
         {{"bones", rig.bones},
          {"frequencies", rig.frequencies},
          {"hidden_width", rig.hidden_width},
          {"layers", rig.layers},
          {"activation", std::string(bags::to_string(rig.activation))},
          {"final_scale", rig.final_scale},
          {"seed", rig.seed}}},
        {"initial_splats", initial_splats},
        {"initial_opacity", initial_opacity},
        {"reference_frame", reference_frame},
        {"eval_interval", eval_interval},
        {"seed", seed},
    };
}

namespace {

void reject_unknown(const json& known, const json& given, const std::string& prefix) {
    if (!given.is_object()) {
        throw ConfigError("config section '" + prefix + "' must be a table");
    }
    for (const auto& [key, value] : given.items()) {
        const std::string name = prefix.empty() ? key : prefix + "." + key;
        if (!known.contains(key)) {
            throw ConfigError("unknown config key '" + name + "'");
        }
        if (known[key].is_object()) {
            reject_unknown(known[key], value, name);
        }
    }
}

} // namespace

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
    json merged = base.to_json();
    reject_unknown(merged, j, "");
    merged.merge_patch(j);
    TrainConfig c;
    try {
        c.warmup_iterations = merged["warmup_iterations"].get<std::size_t>();
        c.joint_iterations = merged["joint_iterations"].get<std::size_t>();
        const json& w = merged["weights"];
        c.weights = {w["sds"].get<double>(), w["rigid"].get<double>(), w["perceptual"].get<double>(),
                     w["l1"].get<double>(), w["mask"].get<double>()};
        c.warmup_tau_start = merged["warmup_tau_start"].get<double>();
        c.warmup_tau_end = merged["warmup_tau_end"].get<double>();
        c.joint_tau_start = merged["joint_tau_start"].get<double>();
        c.joint_tau_end = merged["joint_tau_end"].get<double>();
        c.curriculum_radius = merged["curriculum_radius"].get<std::size_t>();
        c.curriculum_frames_per_interval = merged["curriculum_frames_per_interval"].get<std::size_t>();
        c.curriculum_interval = merged["curriculum_interval"].get<std::size_t>();
        const json& l = merged["lr"];
        c.lr = {l["position"].get<double>(), l["position_final"].get<double>(), l["rotation"].get<double>(),
                l["scale"].get<double>(),    l["opacity"].get<double>(),        l["color"].get<double>(),
                l["rig"].get<double>(),      l["rig_final"].get<double>(), l["rig_ramp"].get<std::size_t>(),
                l["root"].get<double>()};
        c.densify_interval = merged["densify_interval"].get<std::size_t>();
        c.densify_until = merged["densify_until"].get<std::size_t>();
        c.max_splats = merged["max_splats"].get<std::size_t>();
        const json& d = merged["densify"];
        c.densify.grad_threshold = d["grad_threshold"].get<double>();
        c.densify.split_scale_fraction = d["split_scale_fraction"].get<double>();
        c.densify.prune_opacity = d["prune_opacity"].get<double>();
        c.densify.split_shrink = d["split_shrink"].get<double>();
        const json& s = merged["sds_camera"];
        c.sds_camera = {s["radius_min"].get<double>(),        s["radius_max"].get<double>(),
                        s["elevation_min_deg"].get<double>(), s["elevation_max_deg"].get<double>(),
                        s["azimuth_min_deg"].get<double>(),   s["azimuth_max_deg"].get<double>()};
        const json& r = merged["rig"];
        c.rig.bones = r["bones"].get<std::size_t>();
        c.rig.frequencies = r["frequencies"].get<std::size_t>();
        c.rig.hidden_width = r["hidden_width"].get<std::size_t>();
        c.rig.layers = r["layers"].get<std::size_t>();
        c.rig.activation = activation_from_string(r["activation"].get<std::string>());
        c.rig.final_scale = r["final_scale"].get<double>();
        c.rig.seed = r["seed"].get<std::uint64_t>();
        c.initial_splats = merged["initial_splats"].get<std::size_t>();
        c.initial_opacity = merged["initial_opacity"].get<double>();
        c.reference_frame = merged["reference_frame"].get<int>();
        c.eval_interval = merged["eval_interval"].get<std::size_t>();
        c.seed = merged["seed"].get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

double tau_schedule(const TrainConfig& config, Stage stage, std::size_t iteration) {
    double start = config.joint_tau_start;
    double end = config.joint_tau_end;
    std::size_t length = config.joint_iterations;
    if (stage == Stage::Warmup) {
        start = config.warmup_tau_start;
        end = config.warmup_tau_end;
        length = config.warmup_iterations;
    } else if (stage == Stage::Done) {
        return end;
    }
    if (length == 0) {
        return start;
    }
    const double u = static_cast<double>(std::min(iteration, length)) / static_cast<double>(length);
    return (1.0 - u) * start + u * end;
}

std::vector<std::size_t> curriculum_frames(std::size_t frame_count, std::size_t reference,
                                           std::size_t joint_iteration, const TrainConfig& config) {
    if (frame_count == 0) {
        return {};
    }
    if (reference >= frame_count) {
        throw ConfigError("reference frame " + std::to_string(reference) + " is outside the sequence");
    }
    std::vector<std::size_t> order(frame_count);
    for (std::size_t i = 0; i < frame_count; ++i) {
        order[i] = i;
    }
    auto distance = [reference](std::size_t i) { return i > reference ? i - reference : reference - i; };
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return distance(a) < distance(b); });
    const std::size_t grown = config.curriculum_frames_per_interval * (joint_iteration / config.curriculum_interval);
    const std::size_t count = std::min(frame_count, 2 * config.curriculum_radius + 1 + grown);
    std::vector<std::size_t> active(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(active.begin(), active.end());
    return active;
}

Camera sample_sds_camera(std::mt19937_64& rng, const SdsCameraConfig& config, const Vec3& center, double extent,
                         const Intrinsics& intrinsics) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto draw = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    constexpr double deg = std::numbers::pi / 180.0;
    const double az = draw(config.azimuth_min_deg, config.azimuth_max_deg) * deg;
    const double el = draw(config.elevation_min_deg, config.elevation_max_deg) * deg;
    const double radius = draw(config.radius_min, config.radius_max) * extent;
    const Vec3 eye = center + radius * Vec3(std::cos(el) * std::sin(az), std::sin(el), -std::cos(el) * std::cos(az));
    return Camera::look_at(eye, center, Vec3::UnitY(), intrinsics);
}

double psnr(const Image& a, const Image& b) {
    if (!a.same_shape(b) || a.data.empty()) {
        throw DimensionError("psnr: image shapes differ");
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        sq += d * d;
    }
    const double mse = sq / static_cast<double>(a.data.size());
    if (mse == 0.0) {
        return kPsnrCap;
    }
    return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double mask_iou(const Image& alpha, const Image& mask) {
    if (alpha.width != mask.width || alpha.height != mask.height || alpha.channels != 1 || mask.channels != 1) {
        throw DimensionError("mask_iou: shapes differ");
    }
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < alpha.data.size(); ++i) {
        const bool a = alpha.data[i] > 0.5;
        const bool m = mask.data[i] > 0.5;
        inter += (a && m) ? 1 : 0;
        uni += (a || m) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

json Metrics::to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    return {{"psnr", num(psnr)},
            {"iou", num(iou)},
            {"rigid", num(rigid)},
            {"heldout_psnr", num(heldout_psnr)},
            {"frame_psnr", frame_psnr},
            {"frame_iou", frame_iou},
            {"frame_rigid", frame_rigid}};
}

Metrics evaluate(const Model& model, const Dataset& dataset) {
    if (model.frame_count() != dataset.frames.size()) {
        throw DimensionError("evaluate: model has " + std::to_string(model.frame_count()) + " frames, dataset " +
                             std::to_string(dataset.frames.size()));
    }
    Metrics m;
    for (std::size_t f = 0; f < dataset.frames.size(); ++f) {
        const Frame& fr = dataset.frames[f];
        const PosedSplats posed = pose_model_frame(model, f);
        const RenderOutput out = render_forward(posed.world, fr.camera, model.background);
        m.frame_psnr.push_back(psnr(out.color, fr.image));
        m.frame_iou.push_back(mask_iou(out.alpha, fr.mask));
        const auto jac = posed.jacobians();
        m.frame_rigid.push_back(rigid_loss(jac).value);
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) {
            s += x;
        }
        return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
    };
    m.psnr = mean(m.frame_psnr);
    m.iou = mean(m.frame_iou);
    m.rigid = mean(m.frame_rigid);
    std::vector<double> held;
    for (const Frame& h : dataset.held_out) {
        const RenderOutput out = render_model(model, h.t, h.camera);
        held.push_back(psnr(out.color, h.image));
    }
    m.heldout_psnr = mean(held);
    return m;
}

namespace {

BoneRig make_rig(const TrainConfig& config, const GaussianCloud& cloud, double extent, double canonical_time) {
    BoneRigConfig rc = config.rig;
    if (cloud.size() < rc.bones) {
        throw ConfigError("cannot place " + std::to_string(rc.bones) + " bones on " + std::to_string(cloud.size()) +
                          " splats");
    }
    rc.seed = config.rig.seed ^ (config.seed * 0x9E3779B97F4A7C15ULL);
    std::vector<Vec3> points(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        points[i] = cloud.get(i).position;
    }
    const auto centers = farthest_point_sampling(points, rc.bones);
    const double sigma = 0.5 * extent / std::cbrt(static_cast<double>(rc.bones));
    const std::vector<Vec3> log_precision(rc.bones, Vec3::Constant(-2.0 * std::log(sigma)));
    return BoneRig(rc, centers, log_precision, canonical_time);
}

Vec3 centroid(const std::vector<Vec3>& points) {
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) {
        c += p;
    }
    return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
}

} // namespace

Trainer::Trainer(TrainConfig config, const Dataset& dataset, PriorProvider& prior)
    : config_(std::move(config)), dataset_(dataset), prior_(prior) {
    config_.validate();
    initialize();
}

Trainer::Trainer(TrainConfig config, const Dataset& dataset, PriorProvider& prior, Model model, TrainState state)
    : config_(std::move(config)), dataset_(dataset), prior_(prior), model_(std::move(model)),
      state_(std::move(state)) {
    config_.validate();
    if (model_.frame_count() != dataset_.frames.size()) {
        throw DimensionError("checkpoint has " + std::to_string(model_.frame_count()) + " frames, dataset has " +
                             std::to_string(dataset_.frames.size()));
    }
}

void Trainer::initialize() {
    if (dataset_.frames.empty()) {
        throw ConfigError("dataset has no frames");
    }
    const std::size_t frames = dataset_.frames.size();
    const std::size_t ref =
        config_.reference_frame < 0 ? (frames - 1) / 2 : static_cast<std::size_t>(config_.reference_frame);
    if (ref >= frames) {
        throw ConfigError("reference_frame " + std::to_string(config_.reference_frame) + " is outside the sequence");
    }
    state_ = TrainState{};
    state_.reference_frame = ref;
    state_.rng.seed(config_.seed);
    const Frame& fr = dataset_.frames[ref];
    MaskInitConfig mi;
    mi.count = config_.initial_splats;
    mi.scene_extent = dataset_.scene_extent;
    mi.scene_center = dataset_.scene_center;
    mi.initial_opacity = config_.initial_opacity;
    mi.seed = config_.seed;
    model_.cloud = init_from_mask(fr.image, fr.mask, fr.camera, mi);
    model_.rig = make_rig(config_, model_.cloud, dataset_.scene_extent, fr.t);
    model_.reset_roots(dataset_.normalized_times());
    model_.background = dataset_.background;
    init_optimizers();
    if (config_.warmup_iterations == 0) {
        state_.stage = Stage::Joint;
        state_.active_frames = curriculum_frames(frames, ref, 0, config_);
    }
}

void Trainer::init_optimizers() {
    const LearningRates& l = config_.lr;
    state_.cloud_optim.clear();
    for (double rate : {position_lr(), l.rotation, l.scale, l.opacity, l.color}) {
        state_.cloud_optim.emplace_back(AdamConfig{rate});
    }
    state_.rig_optim.assign(model_.rig.parameters().size(), AdamState(AdamConfig{l.rig}));
    state_.root_optim.assign(2, AdamState(AdamConfig{l.root}));
}

double Trainer::position_lr() const {
    const double total = static_cast<double>(config_.warmup_iterations + config_.joint_iterations);
    const double done = static_cast<double>(state_.stage == Stage::Warmup ? state_.iteration
                                                                          : config_.warmup_iterations + state_.iteration);
    const double u = total > 0.0 ? std::min(1.0, done / total) : 0.0;
    const double lr0 = config_.lr.position * dataset_.scene_extent;
    if (config_.lr.position_final <= 0.0 || config_.lr.position <= 0.0) {
        return lr0 * (1.0 - u);
    }
    return lr0 * std::pow(config_.lr.position_final / config_.lr.position, u);
}

double Trainer::rig_lr() const {
    const double total = static_cast<double>(config_.joint_iterations);
    const double u = total > 0.0 && state_.stage != Stage::Warmup
                         ? std::min(1.0, static_cast<double>(state_.iteration) / total)
                         : 0.0;
    double ramp = 1.0;
    if (state_.stage != Stage::Warmup && state_.iteration < config_.lr.rig_ramp) {
        ramp = static_cast<double>(state_.iteration + 1) / static_cast<double>(config_.lr.rig_ramp);
    }
    if (config_.lr.rig_final <= 0.0 || config_.lr.rig <= 0.0) {
        return ramp * config_.lr.rig * (1.0 - u);
    }
    return ramp * config_.lr.rig * std::pow(config_.lr.rig_final / config_.lr.rig, u);
}

void Trainer::check_finite(double loss) {
    bool ok = std::isfinite(loss);
    std::string what = "loss";
    if (ok) {
        const Model& m = model_;
        std::vector<const DenseArray*> params = m.cloud.parameters();
        for (const DenseArray* p : m.rig.parameters()) {
            params.push_back(p);
        }
        params.push_back(&model_.root_rotations);
        params.push_back(&model_.root_translations);
        for (const DenseArray* p : params) {
            if (!all_finite(p->values())) {
                ok = false;
                what = "parameters";
                break;
            }
        }
    }
    if (ok) {
        return;
    }
    if (divergence_dump) {
        divergence_dump(model_, state_);
    }
    throw NumericError("training diverged in the " + to_string(state_.stage) + " stage at iteration " +
                       std::to_string(state_.iteration) + ": " + what + " not finite");
}

StepReport Trainer::train_step(bool joint) {
    const LossWeights& w = config_.weights;
    StepReport report;
    std::size_t frame = state_.reference_frame;
    if (joint) {
        state_.active_frames = curriculum_frames(dataset_.frames.size(), state_.reference_frame, state_.iteration, config_);
        std::uniform_int_distribution<std::size_t> pick(0, state_.active_frames.size() - 1);
        frame = state_.active_frames[pick(state_.rng)];
    }
    report.frame = frame;
    const Frame& fr = dataset_.frames[frame];

    RigPoses poses;
    PosedSplats posed;
    if (joint) {
        poses = rig_forward(model_.rig, fr.t);
        posed = pose_from_poses(model_.cloud, poses.canonical, poses.target, model_.root_of(frame));
    } else {
        posed = pose_cloud(model_.cloud, BonePose{}, {}, model_.root_of(frame));
    }

    const RenderOutput out = render_forward(posed.world, fr.camera, model_.background);
    LossTerms terms;
    terms.l1 = l1_loss(out.color, fr.image, fr.mask);
    terms.mask = mask_loss(out.alpha, fr.mask);
    if (w.perceptual > 0.0) {
        terms.perceptual = perceptual_loss(out.color, fr.image);
    }
    RenderOutput sds_out;
    bool sds_used = false;
    if (w.sds > 0.0) {
        const Vec3 center = centroid(posed.world.means);
        const Camera cam = sample_sds_camera(state_.rng, config_.sds_camera, center, dataset_.scene_extent,
                                             dataset_.intrinsics);
        sds_out = render_forward(posed.world, cam, model_.background);
        PriorRequest req;
        req.render = &sds_out.color;
        req.reference = &fr.image;
        req.camera = cam;
        req.look_at = center;
        req.time = fr.t;
        req.tau = tau_schedule(config_, state_.stage, state_.iteration);
        req.seed = state_.rng();
        SdsResult r = sds_step(prior_, req, 1.0);
        terms.sds = r.value;
        report.sds_skipped = r.skipped;
        sds_used = !r.skipped;
        terms.sds_grad = std::move(r.grad);
    }
    if (joint && w.rigid > 0.0) {
        terms.rigid = rigid_loss(posed.warp.jacobians);
    }
    const TotalLoss total = total_loss(terms, w);
    report.loss = total.value;
    report.l1 = terms.l1.value;
    report.mask = terms.mask.value;
    report.rigid = terms.rigid.value;
    report.sds = terms.sds;
    check_finite(total.value);

    SplatGrads grads = render_backward(out, &total.color_grad, &total.alpha_grad);
    if (sds_used) {
        add_splat_grads(grads, render_backward(sds_out, &total.sds_grad, nullptr));
    }
    const PosedGrads pg = posed_backward(model_.cloud, posed, grads, total.jacobian_grad);
    accumulate_into(model_.cloud, pg.cloud);
    if (!joint) {
        model_.cloud.accumulate_densify_stats(pg.cloud.view_grad_norm, pg.cloud.position, grads.visible);
    } else {
        rig_backward(model_.rig, poses, pg.target_pose, pg.canonical_pose);
        const Vec4 q(model_.root_rotations.at(frame, 0), model_.root_rotations.at(frame, 1),
                     model_.root_rotations.at(frame, 2), model_.root_rotations.at(frame, 3));
        const Vec4 gq = quat_to_rotation_backward(q, pg.root_rotation);
        auto gr = model_.root_rotations.grad();
        auto gt = model_.root_translations.grad();
        for (int k = 0; k < 4; ++k) {
            gr[frame * 4 + k] += gq[k];
        }
        for (int k = 0; k < 3; ++k) {
            gt[frame * 3 + k] += pg.root_translation[k];
        }
    }
    apply_updates(joint);
    check_finite(total.value);
    return report;
}

void Trainer::apply_updates(bool joint) {
    state_.cloud_optim[0].config.learning_rate = position_lr();
    auto params = model_.cloud.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        params[k]->grad();
        adam_step(*params[k], state_.cloud_optim[k]);
    }
    model_.cloud.enforce_invariants(0.5 * dataset_.scene_extent);
    if (!joint) {
        return;
    }
    auto rig_params = model_.rig.parameters();
    for (auto& st : state_.rig_optim) {
        st.config.learning_rate = rig_lr();
    }
    for (std::size_t k = 0; k < rig_params.size(); ++k) {
        rig_params[k]->grad();
        adam_step(*rig_params[k], state_.rig_optim[k]);
    }
    model_.root_rotations.grad();
    model_.root_translations.grad();
    adam_step(model_.root_rotations, state_.root_optim[0]);
    adam_step(model_.root_translations, state_.root_optim[1]);
}

void Trainer::maybe_densify() {
    const std::size_t done = state_.iteration + 1;
    const std::size_t until = config_.densify_until == 0 ? config_.warmup_iterations : config_.densify_until;
    if (config_.densify_interval == 0 || done % config_.densify_interval != 0 || done >= until ||
        model_.cloud.size() >= config_.max_splats) {
        return;
    }
    DensifyConfig dc = config_.densify;
    dc.scene_extent = dataset_.scene_extent;
    const DensifyReport r = densify_and_prune(model_.cloud, dc, state_.rng);
    const auto params = model_.cloud.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        state_.cloud_optim[k].remap_rows(r.source, params[k]->row_width());
    }
    spdlog::debug("densify at {}: +{} clones, +{} splits, -{} pruned, {} splats", done, r.cloned, r.split, r.pruned,
                  model_.cloud.size());
}

void Trainer::record_eval() {
    json j = evaluate(model_, dataset_).to_json();
    j["stage"] = to_string(state_.stage);
    j["iteration"] = state_.iteration;
    j["splats"] = model_.cloud.size();
    state_.history.push_back(j);
    if (metrics_sink) {
        metrics_sink(j);
    }
}

StepReport Trainer::step() {
    StepReport report;
    if (state_.stage == Stage::Warmup) {
        if (state_.iteration < config_.warmup_iterations) {
            report = train_step(false);
            maybe_densify();
            ++state_.iteration;
            if (config_.eval_interval > 0 && state_.iteration % config_.eval_interval == 0 &&
                state_.iteration < config_.warmup_iterations) {
                record_eval();
            }
        }
        if (state_.iteration >= config_.warmup_iterations) {
            if (config_.warmup_iterations > 0) {
                record_eval();
            }
            const Frame& ref = dataset_.frames[state_.reference_frame];
            model_.rig = make_rig(config_, model_.cloud, dataset_.scene_extent, ref.t);
            state_.rig_optim.assign(model_.rig.parameters().size(), AdamState(AdamConfig{config_.lr.rig}));
            state_.stage = Stage::Joint;
            state_.iteration = 0;
            state_.active_frames = curriculum_frames(dataset_.frames.size(), state_.reference_frame, 0, config_);
        }
        return report;
    }
    if (state_.stage == Stage::Joint) {
        if (state_.iteration < config_.joint_iterations) {
            report = train_step(true);
            ++state_.iteration;
            if (config_.eval_interval > 0 && state_.iteration % config_.eval_interval == 0 &&
                state_.iteration < config_.joint_iterations) {
                record_eval();
            }
        }
        if (state_.iteration >= config_.joint_iterations) {
            state_.stage = Stage::Done;
            record_eval();
        }
    }
    return report;
}

void Trainer::warmup_stage() {
    while (state_.stage == Stage::Warmup) {
        step();
    }
}

void Trainer::joint_stage() {
    if (state_.stage == Stage::Warmup) {
        throw StateError("joint_stage called before the warm-up finished");
    }
    while (state_.stage == Stage::Joint) {
        step();
    }
}

Metrics Trainer::run() {
    warmup_stage();
    joint_stage();
    return evaluate(model_, dataset_);
}

} // namespace bags
