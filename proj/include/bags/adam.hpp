#pragma once

#include "bags/dense_array.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace bags {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-15;
};

/// Moment buffers for one parameter array.
struct AdamState {
    AdamConfig config;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step = 0;

    AdamState() = default;
    explicit AdamState(AdamConfig cfg) : config(cfg) {}

    /// Re-indexes rows after densification. `source[i]` is the old row feeding new row i,
    /// or -1 for a fresh row with zero moments.
    void remap_rows(const std::vector<std::ptrdiff_t>& source, std::size_t row_width);
};

/// Bias-corrected Adam update using `params.grad()`, which is zeroed afterwards.
/// Throws StateError when the gradient buffer was never populated.
void adam_step(DenseArray& params, AdamState& state);

} // namespace bags
