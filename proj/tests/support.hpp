#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sahr/autodiff.hpp"
#include "sahr/random.hpp"

namespace sahr::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = d(rng);
    return t;
}

// Worst relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
// over the given leaves, with central differences of step h. f must build a
// fresh graph from the current leaf values on every call.
inline double gradient_error(const std::vector<Var>& leaves, const std::function<Var()>& f, double h = 1e-6,
                             double floor = 1e-7) {
    for (const auto& v : leaves) v.node().grad = Tensor{};
    backward(f());
    double worst = 0.0;
    for (const auto& leaf : leaves) {
        Node& node = leaf.node();
        const Tensor analytic = node.grad.empty() ? Tensor::zeros(node.value.shape) : node.grad;
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t i = 0; i < node.value.size(); ++i) {
            const double keep = node.value.data[i];
            node.value.data[i] = keep + h;
            const double up = f().value()[0];
            node.value.data[i] = keep - h;
            const double down = f().value()[0];
            node.value.data[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            diff += (analytic.data[i] - numeric) * (analytic.data[i] - numeric);
            na += analytic.data[i] * analytic.data[i];
            nn += numeric * numeric;
        }
        worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor}));
    }
    return worst;
}

// Scalar readout with fixed random weights so every output element matters.
inline Var weighted_sum(const Var& x, std::uint64_t seed) {
    Rng rng(seed);
    return sum(mul(x, constant(random_tensor(x.shape(), rng))));
}

}  // namespace sahr::testing
