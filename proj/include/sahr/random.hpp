#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "sahr/tensor.hpp"

namespace sahr {

// All stochastic decisions (data order, head removal, dropout, noise) draw from
// one of these, so a seed fixes a run completely.
using Rng = std::mt19937_64;

inline Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = dist(rng);
    return t;
}

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = dist(rng);
    return t;
}

inline std::string save_rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline void load_rng_state(Rng& rng, const std::string& state) {
    std::istringstream is(state);
    is >> rng;
}

}  // namespace sahr
