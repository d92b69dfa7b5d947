#include "bags/adam.hpp"

#include "bags/error.hpp"

#include <algorithm>
#include <cmath>

namespace bags {

void AdamState::remap_rows(const std::vector<std::ptrdiff_t>& source, std::size_t row_width) {
    if (first_moment.empty()) {
        return;
    }
    std::vector<double> m(source.size() * row_width, 0.0);
    std::vector<double> v(source.size() * row_width, 0.0);
    for (std::size_t i = 0; i < source.size(); ++i) {
        if (source[i] < 0) {
            continue;
        }
        const auto src = static_cast<std::size_t>(source[i]) * row_width;
        if (src + row_width > first_moment.size()) {
            throw DimensionError("AdamState::remap_rows: source row out of range");
        }
        std::copy_n(first_moment.begin() + static_cast<std::ptrdiff_t>(src), row_width,
                    m.begin() + static_cast<std::ptrdiff_t>(i * row_width));
        std::copy_n(second_moment.begin() + static_cast<std::ptrdiff_t>(src), row_width,
                    v.begin() + static_cast<std::ptrdiff_t>(i * row_width));
    }
    first_moment = std::move(m);
    second_moment = std::move(v);
}

void adam_step(DenseArray& params, AdamState& state) {
    if (params.empty()) {
        ++state.step;
        return;
    }
    if (!params.has_grad()) {
        throw StateError("adam_step: parameter has no gradient buffer");
    }
    auto grad = params.grad();
    auto values = params.values();
    if (state.first_moment.size() != values.size()) {
        state.first_moment.assign(values.size(), 0.0);
        state.second_moment.assign(values.size(), 0.0);
    }
    ++state.step;
    const auto& c = state.config;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(c.beta1, t);
    const double correction2 = 1.0 - std::pow(c.beta2, t);
    const double step_size = c.learning_rate / correction1;
    const double root_correction2 = std::sqrt(correction2);

    for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grad[i];
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        values[i] -= step_size * m / (std::sqrt(v) / root_correction2 + c.epsilon);
        grad[i] = 0.0;
    }
}

} // namespace bags
