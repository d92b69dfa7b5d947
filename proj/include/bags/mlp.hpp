#pragma once

#include "bags/dense_array.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace bags {

enum class Activation { Identity, Relu, Softplus, Tanh };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view name);

struct DenseLayer {
    DenseArray weight; // out x in
    DenseArray bias;   // out
};

/// Fully connected network. The hidden activation is applied after every layer but the last.
/// mlp_forward records the activations it needs on the network itself; mlp_backward consumes them.
class Mlp {
  public:
    Mlp() = default;
    /// `dims` lists layer widths including input and output. Weights use Glorot-uniform
    /// initialization; the last layer is scaled by `final_scale` and has zero bias.
    Mlp(const std::vector<std::size_t>& dims, Activation activation, std::uint64_t seed,
        double final_scale = 1.0);

    std::size_t input_dim() const;
    std::size_t output_dim() const;
    Activation activation() const noexcept { return activation_; }
    std::vector<DenseLayer>& layers() noexcept { return layers_; }
    const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

    std::size_t parameter_count() const;
    /// Weight and bias arrays in layer order (w0, b0, w1, b1, ...).
    std::vector<DenseArray*> parameters();
    std::vector<const DenseArray*> parameters() const;
    void zero_grad();
    /// Forgets the recorded forward pass.
    void clear_tape() noexcept { tape_.valid = false; }

    /// Rebuilds a network from explicit layers; used by deserialization.
    static Mlp from_layers(std::vector<DenseLayer> layers, Activation activation);

  private:
    friend DenseArray mlp_forward(Mlp& net, const DenseArray& input);
    friend DenseArray mlp_backward(Mlp& net, const DenseArray& output_grad);

    struct Tape {
        bool valid = false;
        std::size_t batch = 0;
        std::vector<std::vector<double>> inputs; // input of each layer
        std::vector<std::vector<double>> pre;    // pre-activation of each hidden layer
    };

    void validate() const;

    std::vector<DenseLayer> layers_;
    Activation activation_ = Activation::Softplus;
    Tape tape_;
};

/// Input is (batch x in) or (in). Output has the same leading layout with width out.
DenseArray mlp_forward(Mlp& net, const DenseArray& input);

/// Accumulates parameter gradients from the last mlp_forward and returns the input gradient.
DenseArray mlp_backward(Mlp& net, const DenseArray& output_grad);

/// Tape-free evaluation, safe to call concurrently.
DenseArray mlp_evaluate(const Mlp& net, const DenseArray& input);

} // namespace bags
