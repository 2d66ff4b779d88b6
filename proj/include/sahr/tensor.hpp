#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sahr {

using Shape = std::vector<std::size_t>;

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
    std::ostringstream os;
    (os << ... << std::forward<Args>(args));
    return os.str();
}

}  // namespace detail

inline std::string to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major array of doubles. Every extent is positive.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {
        validate();
    }

    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        validate();
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor(Shape{rows, cols}, std::move(values));
    }

    static Tensor identity(std::size_t n) {
        Tensor t(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
        return t;
    }

    bool empty() const { return shape.empty(); }
    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    // Extent of the last axis; all leading axes fold into rows.
    std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : data.size() / cols(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void validate() const {
        for (std::size_t e : shape)
            if (e == 0) throw std::invalid_argument("tensor: zero extent in shape " + to_string(shape));
        if (numel(shape) != data.size())
            throw std::invalid_argument(detail::concat("tensor: shape ", to_string(shape), " needs ",
                                                       numel(shape), " values, got ", data.size()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape == b.shape && a.data == b.data;
    }
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument("max_abs_diff: shape " + to_string(a.shape) + " vs " +
                                    to_string(b.shape));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace sahr
