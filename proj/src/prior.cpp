#include "bags/prior.hpp"

#include "bags/error.hpp"
#include "bags/io_util.hpp"

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <random>
#include <regex>

namespace bags {

using nlohmann::json;

namespace {

void require_render(const PriorRequest& r) {
    if (r.render == nullptr || r.render->channels != 3 || r.render->data.empty()) {
        throw DimensionError("prior request needs an RGB render");
    }
}

} // namespace

PriorGradient ZeroProvider::gradient(const PriorRequest& request) {
    require_render(request);
    return {Image(request.render->width, request.render->height, 3), 1.0};
}

PriorGradient NoiseProvider::gradient(const PriorRequest& request) {
    require_render(request);
    std::mt19937_64 rng(request.seed);
    std::normal_distribution<double> n(0.0, sigma_);
    PriorGradient out{Image(request.render->width, request.render->height, 3), 1.0};
    for (double& v : out.grad.data) {
        v = n(rng);
    }
    return out;
}

OracleProvider::OracleProvider(GroundTruthFn ground_truth) : ground_truth_(std::move(ground_truth)) {
    if (!ground_truth_) {
        throw ConfigError("oracle prior needs a ground-truth renderer");
    }
}

PriorGradient OracleProvider::gradient(const PriorRequest& request) {
    require_render(request);
    const Image gt = ground_truth_(request.camera, request.time);
    if (!gt.same_shape(*request.render)) {
        throw DimensionError("oracle ground truth does not match the render");
    }
    PriorGradient out{Image(gt.width, gt.height, 3), 1.0};
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        out.grad.data[i] = 2.0 * (request.render->data[i] - gt.data[i]);
    }
    return out;
}

std::string encode_float32_image(const Image& image) {
    ByteWriter w;
    for (double v : image.data) {
        w.f32(static_cast<float>(v));
    }
    return w.take();
}

RemoteProvider::RemoteProvider(RemoteConfig config) : config_(std::move(config)) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(config_.url, m, url_re)) {
        throw ConfigError("remote prior URL must look like http://host:port/path, got '" +
                          config_.url + "'");
    }
    base_ = m[1].str();
    path_ = m[2].matched ? m[2].str() : "/";
    if (config_.retries < 0 || !(config_.timeout_s > 0.0)) {
        throw ConfigError("remote prior needs a positive timeout and non-negative retries");
    }
}

std::string RemoteProvider::encode_request(const PriorRequest& r) {
    require_render(r);
    if (r.reference == nullptr) {
        throw DimensionError("remote prior request needs a reference image");
    }
    const auto render_png = encode_png(*r.render);
    const auto reference_png = encode_png(*r.reference);
    const Vec3 pos = r.camera.position();
    const Vec3 up = r.camera.up();
    json body;
    body["render"] = base64_encode(render_png);
    body["reference"] = base64_encode(reference_png);
    body["camera"] = {{"position", {pos.x(), pos.y(), pos.z()}},
                      {"look_at", {r.look_at.x(), r.look_at.y(), r.look_at.z()}},
                      {"up", {up.x(), up.y(), up.z()}},
                      {"fov_deg", r.camera.vertical_fov_deg()}};
    body["tau"] = r.tau;
    body["seed"] = r.seed;
    return body.dump();
}

PriorGradient RemoteProvider::decode_response(const std::string& text, int width, int height) {
    json body;
    try {
        body = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("remote prior response is not JSON: ") + e.what());
    }
    if (!body.is_object() || !body.contains("grad") || !body["grad"].is_string()) {
        throw FormatError("remote prior response lacks a 'grad' string");
    }
    const auto raw = base64_decode(body["grad"].get<std::string>());
    const std::size_t expected = static_cast<std::size_t>(width) * height * 3;
    if (raw.size() != expected * sizeof(float)) {
        throw FormatError("remote prior gradient has " + std::to_string(raw.size()) +
                          " bytes, expected " + std::to_string(expected * sizeof(float)));
    }
    PriorGradient out{Image(width, height, 3), 1.0};
    ByteReader reader(std::string_view(reinterpret_cast<const char*>(raw.data()), raw.size()));
    for (std::size_t i = 0; i < expected; ++i) {
        out.grad.data[i] = reader.f32();
    }
    if (body.contains("weight")) {
        if (!body["weight"].is_number()) {
            throw FormatError("remote prior 'weight' must be a number");
        }
        out.weight = body["weight"].get<double>();
    }
    return out;
}

PriorGradient RemoteProvider::gradient(const PriorRequest& request) {
    const std::string payload = encode_request(request);
    httplib::Client client(base_);
    const auto timeout = std::chrono::duration<double>(config_.timeout_s);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    std::string last_error;
    for (int attempt = 0; attempt <= config_.retries; ++attempt) {
        auto res = client.Post(path_, payload, "application/json");
        if (!res) {
            last_error = httplib::to_string(res.error());
        } else if (res->status != 200) {
            last_error = "HTTP " + std::to_string(res->status);
        } else {
            return decode_response(res->body, request.render->width, request.render->height);
        }
        spdlog::debug("remote prior attempt {} failed: {}", attempt + 1, last_error);
    }
    throw IoError("remote prior at " + config_.url + " failed: " + last_error);
}

SdsResult sds_step(PriorProvider& provider, const PriorRequest& request, double lambda) {
    if (!(request.tau > 0.0 && request.tau < 1.0)) {
        throw ConfigError("diffusion step tau must lie in (0, 1)");
    }
    require_render(request);
    const Image& render = *request.render;
    SdsResult out;
    PriorGradient g;
    try {
        g = provider.gradient(request);
        if (!g.grad.same_shape(render)) {
            throw DimensionError("prior gradient shape does not match the render");
        }
        for (double v : g.grad.data) {
            if (!std::isfinite(v)) {
                throw NumericError("prior gradient is not finite");
            }
        }
        if (!std::isfinite(g.weight)) {
            throw NumericError("prior weight is not finite");
        }
    } catch (const std::exception& e) {
        spdlog::warn("{} prior failed, skipping the step: {}", provider.name(), e.what());
        out.grad = Image(render.width, render.height, 3);
        out.skipped = true;
        return out;
    }
    out.grad = Image(render.width, render.height, 3);
    double sq = 0.0;
    const double scale = lambda * g.weight;
    for (std::size_t i = 0; i < g.grad.data.size(); ++i) {
        sq += g.grad.data[i] * g.grad.data[i];
        out.grad.data[i] = scale * g.grad.data[i];
    }
    out.value = 0.5 * g.weight * sq / static_cast<double>(render.pixel_count());
    return out;
}

std::unique_ptr<PriorProvider> make_prior(const std::string& spec, GroundTruthFn ground_truth) {
    if (spec == "zero") {
        return std::make_unique<ZeroProvider>();
    }
    if (spec == "noise") {
        return std::make_unique<NoiseProvider>();
    }
    if (spec == "oracle") {
        if (!ground_truth) {
            throw ConfigError("the oracle prior needs a dataset with synthetic ground truth");
        }
        return std::make_unique<OracleProvider>(std::move(ground_truth));
    }
    if (spec.rfind("remote:", 0) == 0) {
        RemoteConfig cfg;
        cfg.url = spec.substr(7);
        return std::make_unique<RemoteProvider>(cfg);
    }
    throw ConfigError("unknown prior '" + spec + "' (expected zero, noise, oracle or remote:URL)");
}

} // namespace bags
