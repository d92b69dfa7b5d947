#include "bags/mlp.hpp"

#include "bags/error.hpp"

#include <Eigen/Core>

#include <cmath>
#include <random>
#include <string>

namespace bags {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

double activate(Activation a, double x) {
    switch (a) {
    case Activation::Identity:
        return x;
    case Activation::Relu:
        return x > 0.0 ? x : 0.0;
    case Activation::Softplus:
        return x > 30.0 ? x : std::log1p(std::exp(x));
    case Activation::Tanh:
        return std::tanh(x);
    }
    return x;
}

double activate_slope(Activation a, double x) {
    switch (a) {
    case Activation::Identity:
        return 1.0;
    case Activation::Relu:
        return x > 0.0 ? 1.0 : 0.0;
    case Activation::Softplus:
        return 1.0 / (1.0 + std::exp(-x));
    case Activation::Tanh: {
        const double t = std::tanh(x);
        return 1.0 - t * t;
    }
    }
    return 1.0;
}

struct BatchView {
    std::size_t batch;
    std::size_t width;
};

BatchView batch_layout(const DenseArray& a, std::size_t expected_width, const char* what) {
    std::size_t batch = 1;
    std::size_t width = a.size();
    if (a.rank() == 2) {
        batch = a.dim(0);
        width = a.dim(1);
    } else if (a.rank() != 1) {
        throw DimensionError(std::string(what) + ": expected rank 1 or 2");
    }
    if (width != expected_width) {
        throw DimensionError(std::string(what) + ": width " + std::to_string(width) +
                             " does not match network dimension " +
                             std::to_string(expected_width));
    }
    return {batch, width};
}

DenseArray shaped_like(const DenseArray& input, std::size_t batch, std::size_t width) {
    if (input.rank() == 2) {
        return DenseArray({batch, width});
    }
    return DenseArray({width});
}

void layer_forward(const DenseLayer& layer, const double* in, std::size_t batch, double* out) {
    const std::size_t n_out = layer.weight.dim(0);
    const std::size_t n_in = layer.weight.dim(1);
    ConstMap x(in, static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(n_in));
    ConstMap w(layer.weight.data(), static_cast<Eigen::Index>(n_out),
               static_cast<Eigen::Index>(n_in));
    Eigen::Map<const Eigen::RowVectorXd> b(layer.bias.data(), static_cast<Eigen::Index>(n_out));
    Map y(out, static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(n_out));
    y.noalias() = x * w.transpose();
    y.rowwise() += b;
}

} // namespace

std::string_view to_string(Activation a) {
    switch (a) {
    case Activation::Identity:
        return "identity";
    case Activation::Relu:
        return "relu";
    case Activation::Softplus:
        return "softplus";
    case Activation::Tanh:
        return "tanh";
    }
    return "identity";
}

Activation activation_from_string(std::string_view name) {
    if (name == "identity") {
        return Activation::Identity;
    }
    if (name == "relu") {
        return Activation::Relu;
    }
    if (name == "softplus") {
        return Activation::Softplus;
    }
    if (name == "tanh") {
        return Activation::Tanh;
    }
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

Mlp::Mlp(const std::vector<std::size_t>& dims, Activation activation, std::uint64_t seed,
         double final_scale)
    : activation_(activation) {
    if (dims.size() < 2) {
        throw DimensionError("Mlp needs at least input and output dimensions");
    }
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const std::size_t n_in = dims[l];
        const std::size_t n_out = dims[l + 1];
        DenseLayer layer{DenseArray({n_out, n_in}), DenseArray({n_out})};
        double bound = std::sqrt(6.0 / static_cast<double>(n_in + n_out));
        if (l + 2 == dims.size()) {
            bound *= final_scale;
        }
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& w : layer.weight.values()) {
            w = dist(rng);
        }
        layers_.push_back(std::move(layer));
    }
}

Mlp Mlp::from_layers(std::vector<DenseLayer> layers, Activation activation) {
    Mlp net;
    net.layers_ = std::move(layers);
    net.activation_ = activation;
    net.validate();
    return net;
}

void Mlp::validate() const {
    if (layers_.empty()) {
        throw DimensionError("Mlp has no layers");
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        if (layer.weight.rank() != 2 || layer.bias.size() != layer.weight.dim(0)) {
            throw DimensionError("Mlp layer " + std::to_string(l) + " has inconsistent shapes");
        }
        if (l > 0 && layers_[l - 1].weight.dim(0) != layer.weight.dim(1)) {
            throw DimensionError("Mlp layer " + std::to_string(l) + " does not chain");
        }
    }
}

std::size_t Mlp::input_dim() const { return layers_.empty() ? 0 : layers_.front().weight.dim(1); }

std::size_t Mlp::output_dim() const { return layers_.empty() ? 0 : layers_.back().weight.dim(0); }

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_) {
        n += layer.weight.size() + layer.bias.size();
    }
    return n;
}

std::vector<DenseArray*> Mlp::parameters() {
    std::vector<DenseArray*> out;
    for (auto& layer : layers_) {
        out.push_back(&layer.weight);
        out.push_back(&layer.bias);
    }
    return out;
}

std::vector<const DenseArray*> Mlp::parameters() const {
    std::vector<const DenseArray*> out;
    for (const auto& layer : layers_) {
        out.push_back(&layer.weight);
        out.push_back(&layer.bias);
    }
    return out;
}

void Mlp::zero_grad() {
    for (auto* p : parameters()) {
        p->zero_grad();
    }
}

DenseArray mlp_forward(Mlp& net, const DenseArray& input) {
    const auto [batch, width] = batch_layout(input, net.input_dim(), "mlp_forward");
    auto& tape = net.tape_;
    tape.valid = false;
    tape.batch = batch;
    tape.inputs.assign(net.layers_.size(), {});
    tape.pre.assign(net.layers_.size(), {});

    std::vector<double> current(input.values().begin(), input.values().end());
    for (std::size_t l = 0; l < net.layers_.size(); ++l) {
        const auto& layer = net.layers_[l];
        std::vector<double> out(batch * layer.weight.dim(0));
        layer_forward(layer, current.data(), batch, out.data());
        tape.inputs[l] = std::move(current);
        if (l + 1 < net.layers_.size()) {
            tape.pre[l] = out;
            for (double& v : out) {
                v = activate(net.activation_, v);
            }
        }
        current = std::move(out);
    }
    if (!all_finite(current)) {
        throw NumericError("mlp_forward: non-finite output");
    }
    tape.valid = true;
    DenseArray result = shaped_like(input, batch, net.output_dim());
    std::copy(current.begin(), current.end(), result.values().begin());
    return result;
}

DenseArray mlp_evaluate(const Mlp& net, const DenseArray& input) {
    const auto [batch, width] = batch_layout(input, net.input_dim(), "mlp_evaluate");
    std::vector<double> current(input.values().begin(), input.values().end());
    const auto& layers = net.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        std::vector<double> out(batch * layers[l].weight.dim(0));
        layer_forward(layers[l], current.data(), batch, out.data());
        if (l + 1 < layers.size()) {
            for (double& v : out) {
                v = activate(net.activation(), v);
            }
        }
        current = std::move(out);
    }
    if (!all_finite(current)) {
        throw NumericError("mlp_evaluate: non-finite output");
    }
    DenseArray result = shaped_like(input, batch, net.output_dim());
    std::copy(current.begin(), current.end(), result.values().begin());
    return result;
}

DenseArray mlp_backward(Mlp& net, const DenseArray& output_grad) {
    auto& tape = net.tape_;
    if (!tape.valid) {
        throw StateError("mlp_backward called before mlp_forward");
    }
    const auto [batch, width] = batch_layout(output_grad, net.output_dim(), "mlp_backward");
    if (batch != tape.batch) {
        throw DimensionError("mlp_backward: batch differs from the recorded forward pass");
    }

    std::vector<double> delta(output_grad.values().begin(), output_grad.values().end());
    for (std::size_t l = net.layers_.size(); l-- > 0;) {
        auto& layer = net.layers_[l];
        const auto n_out = static_cast<Eigen::Index>(layer.weight.dim(0));
        const auto n_in = static_cast<Eigen::Index>(layer.weight.dim(1));
        const auto rows = static_cast<Eigen::Index>(batch);

        if (l + 1 < net.layers_.size()) {
            const auto& pre = tape.pre[l];
            for (std::size_t i = 0; i < delta.size(); ++i) {
                delta[i] *= activate_slope(net.activation_, pre[i]);
            }
        }
        ConstMap d(delta.data(), rows, n_out);
        ConstMap x(tape.inputs[l].data(), rows, n_in);
        Map gw(layer.weight.grad().data(), n_out, n_in);
        gw.noalias() += d.transpose() * x;
        Eigen::Map<Eigen::RowVectorXd> gb(layer.bias.grad().data(), n_out);
        gb += d.colwise().sum();

        std::vector<double> next(batch * static_cast<std::size_t>(n_in));
        ConstMap w(layer.weight.data(), n_out, n_in);
        Map dx(next.data(), rows, n_in);
        dx.noalias() = d * w;
        delta = std::move(next);
    }

    DenseArray result = shaped_like(output_grad, batch, net.input_dim());
    std::copy(delta.begin(), delta.end(), result.values().begin());
    return result;
}

} // namespace bags
