#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// Every primitive returns a Var. When at least one input requires a gradient
// the result keeps handles to its inputs plus a closure that pushes the
// output gradient back into them. Graphs are rebuilt on every forward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "sahr/tensor.hpp"

namespace sahr {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // empty until first touched
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward_fn;
    std::uint64_t seq = 0;  // execution order within the creating thread
    const char* op = "leaf";

    Tensor& grad_ref() {
        if (grad.empty()) grad = Tensor::zeros(value.shape);
        return grad;
    }
};

namespace detail {

inline std::uint64_t next_seq() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}

}  // namespace detail

// While alive, new results on this thread record no graph.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth(); }
    ~NoGradGuard() { --detail::no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
        node_->seq = detail::next_seq();
    }
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }

    // Zero-filled when backward never reached this variable.
    Tensor grad() const {
        return node_->grad.empty() ? Tensor::zeros(node_->value.shape) : node_->grad;
    }
    void zero_grad() { node_->grad = Tensor{}; }

    Node& node() const { return *node_; }
    const NodePtr& node_ptr() const { return node_; }

private:
    NodePtr node_;
};

inline Var parameter(Tensor value) { return Var(std::move(value), true); }
inline Var constant(Tensor value) { return Var(std::move(value), false); }

namespace detail {

inline Var record(const char* op, Tensor value, std::vector<Var> inputs,
                  std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    node->seq = next_seq();
    bool needs = false;
    if (no_grad_depth() == 0)
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return Var(std::move(node));
}

inline bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
inline Tensor& in_grad(Node& self, std::size_t i) { return self.inputs[i]->grad_ref(); }
inline const Tensor& in_value(const Node& self, std::size_t i) { return self.inputs[i]->value; }

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(concat(op, ": shape mismatch ", to_string(a), " vs ", to_string(b)));
}

inline void require_rank2(const char* op, const Var& x) {
    if (x.shape().size() != 2)
        throw std::invalid_argument(concat(op, ": expected a matrix, got shape ", to_string(x.shape())));
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

// out[n x p] += a[n x k] * b[k x p]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                    std::size_t p) {
    const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k), P = static_cast<Eigen::Index>(p);
    MutMap(out, N, P).noalias() += ConstMap(a, N, K) * ConstMap(b, K, P);
}

// out[n x p] += a[n x k] * b[p x k]^T
inline void gemm_nt(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                    std::size_t p) {
    const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k), P = static_cast<Eigen::Index>(p);
    MutMap(out, N, P).noalias() += ConstMap(a, N, K) * ConstMap(b, P, K).transpose();
}

// out[k x p] += a[n x k]^T * b[n x p]
inline void gemm_tn(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                    std::size_t p) {
    const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k), P = static_cast<Eigen::Index>(p);
    MutMap(out, K, P).noalias() += ConstMap(a, N, K).transpose() * ConstMap(b, N, P);
}

template <typename F, typename DF>
Var unary(const char* op, const Var& x, F f, DF df) {
    Tensor out(x.shape());
    const auto& xv = x.value().data;
    for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = f(xv[i]);
    return record(op, std::move(out), {x}, [df](Node& self) {
        const auto& xv = in_value(self, 0).data;
        auto& g = in_grad(self, 0).data;
        for (std::size_t i = 0; i < xv.size(); ++i)
            g[i] += self.grad.data[i] * df(xv[i], self.value.data[i]);
    });
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise arithmetic

inline Var matmul(const Var& a, const Var& b) {
    detail::require_rank2("matmul", a);
    detail::require_rank2("matmul", b);
    const std::size_t n = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
    if (b.shape()[0] != k) detail::shape_error("matmul", a.shape(), b.shape());
    Tensor out(Shape{n, p});
    detail::gemm_nn(a.value().data.data(), b.value().data.data(), out.data.data(), n, k, p);
    return detail::record("matmul", std::move(out), {a, b}, [n, k, p](Node& self) {
        const double* g = self.grad.data.data();
        if (detail::wants(self, 0))
            detail::gemm_nt(g, detail::in_value(self, 1).data.data(),
                            detail::in_grad(self, 0).data.data(), n, p, k);
        if (detail::wants(self, 1))
            detail::gemm_tn(detail::in_value(self, 0).data.data(), g,
                            detail::in_grad(self, 1).data.data(), n, k, p);
    });
}

inline Var add(const Var& a, const Var& b) {
    if (a.shape() != b.shape()) detail::shape_error("add", a.shape(), b.shape());
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return detail::record("add", std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (!detail::wants(self, k)) continue;
            auto& g = detail::in_grad(self, k).data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    if (a.shape() != b.shape()) detail::shape_error("subtract", a.shape(), b.shape());
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return detail::record("subtract", std::move(out), {a, b}, [](Node& self) {
        if (detail::wants(self, 0)) {
            auto& g = detail::in_grad(self, 0).data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (detail::wants(self, 1)) {
            auto& g = detail::in_grad(self, 1).data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    if (a.shape() != b.shape()) detail::shape_error("multiply", a.shape(), b.shape());
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return detail::record("multiply", std::move(out), {a, b}, [](Node& self) {
        const auto& av = detail::in_value(self, 0).data;
        const auto& bv = detail::in_value(self, 1).data;
        if (detail::wants(self, 0)) {
            auto& g = detail::in_grad(self, 0).data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (detail::wants(self, 1)) {
            auto& g = detail::in_grad(self, 1).data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

inline Var scale(const Var& x, double s) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * s;
    return detail::record("scale", std::move(out), {x}, [s](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

// x[... x d] + bias[d], broadcast over every leading position.
inline Var add_bias(const Var& x, const Var& bias) {
    const std::size_t d = x.cols();
    if (bias.shape() != Shape{d}) detail::shape_error("add_bias", x.shape(), bias.shape());
    Tensor out = x.value();
    const std::size_t rows = out.rows();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out.data[r * d + j] += bias.value()[j];
    return detail::record("add_bias", std::move(out), {x, bias}, [rows, d](Node& self) {
        if (detail::wants(self, 0)) {
            auto& g = detail::in_grad(self, 0).data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (detail::wants(self, 1)) {
            auto& g = detail::in_grad(self, 1).data;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
        }
    });
}

inline Var transpose(const Var& x) {
    detail::require_rank2("transpose", x);
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    Tensor out(Shape{m, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data[j * n + i] = x.value().data[i * m + j];
    return detail::record("transpose", std::move(out), {x}, [n, m](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad.data[j * n + i];
    });
}

inline Var reshape(const Var& x, Shape shape) {
    if (numel(shape) != x.value().size()) detail::shape_error("reshape", x.shape(), shape);
    Tensor out(std::move(shape), x.value().data);
    return detail::record("reshape", std::move(out), {x}, [](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// Concatenate matrices with equal row counts along the column axis.
inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    for (const auto& p : parts) detail::require_rank2("concat_cols", p);
    const std::size_t n = parts[0].shape()[0];
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape()[0] != n) detail::shape_error("concat_cols", parts[0].shape(), p.shape());
        widths.push_back(p.shape()[1]);
        total += p.shape()[1];
    }
    Tensor out(Shape{n, total});
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& src = parts[k].value().data;
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(src.begin() + i * widths[k], widths[k], out.data.begin() + i * total + offset);
        offset += widths[k];
    }
    return detail::record("concat_cols", std::move(out), parts, [n, total, widths](Node& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (detail::wants(self, k)) {
                auto& g = detail::in_grad(self, k).data;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j)
                        g[i * widths[k] + j] += self.grad.data[i * total + offset + j];
            }
            offset += widths[k];
        }
    });
}

// Rows [begin, end) of a matrix.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
    detail::require_rank2("slice_rows", x);
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    if (begin >= end || end > n)
        throw std::invalid_argument(detail::concat("slice_rows: range [", begin, ",", end,
                                                   ") invalid for shape ", to_string(x.shape())));
    Tensor out(Shape{end - begin, m},
               std::vector<double>(x.value().data.begin() + begin * m, x.value().data.begin() + end * m));
    return detail::record("slice_rows", std::move(out), {x}, [begin, m](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * m + i] += self.grad[i];
    });
}

// Columns [begin, end) of a matrix.
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
    detail::require_rank2("slice_cols", x);
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    if (begin >= end || end > m)
        throw std::invalid_argument(detail::concat("slice_cols: range [", begin, ",", end,
                                                   ") invalid for shape ", to_string(x.shape())));
    const std::size_t w = end - begin;
    Tensor out(Shape{n, w});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) out.data[i * w + j] = x.value().data[i * m + begin + j];
    return detail::record("slice_cols", std::move(out), {x}, [n, m, w, begin](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * m + begin + j] += self.grad.data[i * w + j];
    });
}

// ---------------------------------------------------------------------------
// Activations

inline Var relu(const Var& x) {
    return detail::unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& x) {
    return detail::unary(
        "sigmoid", x, [](double v) { return detail::sigmoid_scalar(v); },
        [](double, double y) { return y * (1.0 - y); });
}

// x * sigmoid(x)
inline Var swish(const Var& x) {
    return detail::unary(
        "swish", x, [](double v) { return v * detail::sigmoid_scalar(v); },
        [](double v, double) {
            const double s = detail::sigmoid_scalar(v);
            return s * (1.0 + v * (1.0 - s));
        });
}

// Splits the last axis in half: first_half * sigmoid(second_half).
inline Var glu(const Var& x) {
    const std::size_t d = x.cols();
    if (d % 2 != 0)
        throw std::invalid_argument("glu: last axis must be even, got shape " + to_string(x.shape()));
    const std::size_t h = d / 2, rows = x.value().rows();
    Shape shape = x.shape();
    shape.back() = h;
    Tensor out(shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < h; ++j)
            out.data[r * h + j] =
                x.value().data[r * d + j] * detail::sigmoid_scalar(x.value().data[r * d + h + j]);
    return detail::record("glu", std::move(out), {x}, [rows, d, h](Node& self) {
        const auto& xv = detail::in_value(self, 0).data;
        auto& g = detail::in_grad(self, 0).data;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < h; ++j) {
                const double a = xv[r * d + j];
                const double s = detail::sigmoid_scalar(xv[r * d + h + j]);
                const double go = self.grad.data[r * h + j];
                g[r * d + j] += go * s;
                g[r * d + h + j] += go * a * s * (1.0 - s);
            }
    });
}

// ---------------------------------------------------------------------------
// Indexing and masking

// Rows of table[V x d] selected by ids.
inline Var embedding(const Var& table, const std::vector<int>& ids) {
    detail::require_rank2("embedding", table);
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
    Tensor out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw std::invalid_argument(
                detail::concat("embedding: id ", ids[i], " out of range for table ", to_string(table.shape())));
        std::copy_n(table.value().data.begin() + ids[i] * d, d, out.data.begin() + i * d);
    }
    return detail::record("embedding", std::move(out), {table}, [ids, d](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += self.grad.data[i * d + j];
    });
}

// Replaces x[i] by value wherever mask[i] is set; masked entries pass no gradient.
inline Var masked_fill(const Var& x, const std::vector<bool>& mask, double value) {
    if (mask.size() != x.value().size())
        throw std::invalid_argument(detail::concat("masked_fill: mask of ", mask.size(),
                                                   " entries for shape ", to_string(x.shape())));
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        if (mask[i]) out[i] = value;
    return detail::record("masked_fill", std::move(out), {x}, [mask](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!mask[i]) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Convolutions over time. Signals are [time x channels].

// Per-channel convolution with an odd kernel[k x c], zero "same" padding.
inline Var depthwise_conv1d(const Var& x, const Var& kernel) {
    detail::require_rank2("depthwise_conv1d", x);
    detail::require_rank2("depthwise_conv1d", kernel);
    const std::size_t n = x.shape()[0], c = x.shape()[1], k = kernel.shape()[0];
    if (kernel.shape()[1] != c) detail::shape_error("depthwise_conv1d", x.shape(), kernel.shape());
    if (k % 2 == 0)
        throw std::invalid_argument(detail::concat("depthwise_conv1d: kernel size must be odd, got ", k));
    const auto half = static_cast<std::ptrdiff_t>(k / 2);
    Tensor out(Shape{n, c});
    const auto& xv = x.value().data;
    const auto& kv = kernel.value().data;
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t tap = 0; tap < k; ++tap) {
            const auto src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(tap) - half;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
            for (std::size_t ch = 0; ch < c; ++ch)
                out.data[t * c + ch] += kv[tap * c + ch] * xv[src * c + ch];
        }
    return detail::record("depthwise_conv1d", std::move(out), {x, kernel}, [n, c, k, half](Node& self) {
        const auto& xv = detail::in_value(self, 0).data;
        const auto& kv = detail::in_value(self, 1).data;
        const bool gx = detail::wants(self, 0), gk = detail::wants(self, 1);
        double* dx = gx ? detail::in_grad(self, 0).data.data() : nullptr;
        double* dk = gk ? detail::in_grad(self, 1).data.data() : nullptr;
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t tap = 0; tap < k; ++tap) {
                const auto src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(tap) - half;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double go = self.grad.data[t * c + ch];
                    if (gx) dx[src * c + ch] += go * kv[tap * c + ch];
                    if (gk) dk[tap * c + ch] += go * xv[src * c + ch];
                }
            }
    });
}

// x[n x c_in] * weight[c_in x c_out] + bias[c_out]
inline Var pointwise_conv1d(const Var& x, const Var& weight, const Var& bias) {
    return add_bias(matmul(x, weight), bias);
}

// Valid (unpadded) strided convolution. weight is [(kernel * c_in) x c_out],
// row index tap * c_in + channel. Output length is (T - kernel) / stride + 1.
inline Var strided_conv1d(const Var& x, const Var& weight, const Var& bias, std::size_t kernel,
                          std::size_t stride) {
    detail::require_rank2("strided_conv1d", x);
    detail::require_rank2("strided_conv1d", weight);
    const std::size_t len = x.shape()[0], cin = x.shape()[1], cout = weight.shape()[1];
    if (kernel == 0 || stride == 0) throw std::invalid_argument("strided_conv1d: kernel and stride must be positive");
    if (weight.shape()[0] != kernel * cin) detail::shape_error("strided_conv1d", x.shape(), weight.shape());
    if (bias.shape() != Shape{cout}) detail::shape_error("strided_conv1d", weight.shape(), bias.shape());
    if (len < kernel)
        throw std::invalid_argument(detail::concat("strided_conv1d: input length ", len,
                                                   " shorter than kernel ", kernel));
    const std::size_t out_len = (len - kernel) / stride + 1;
    const std::size_t patch = kernel * cin;
    // Consecutive taps are contiguous rows, so output window t is the contiguous
    // patch starting at row t * stride: a strided view serves as the im2col matrix.
    using PatchMap = Eigen::Map<const detail::RowMajor, 0, Eigen::OuterStride<>>;
    const auto T = static_cast<Eigen::Index>(out_len), K = static_cast<Eigen::Index>(patch),
               C = static_cast<Eigen::Index>(cout), S = static_cast<Eigen::Index>(stride * cin);
    Tensor out(Shape{out_len, cout});
    for (std::size_t t = 0; t < out_len; ++t) std::copy_n(bias.value().data.begin(), cout, out.data.begin() + t * cout);
    detail::MutMap(out.data.data(), T, C).noalias() +=
        PatchMap(x.value().data.data(), T, K, Eigen::OuterStride<>(S)) * detail::ConstMap(weight.value().data.data(), K, C);
    return detail::record("strided_conv1d", std::move(out), {x, weight, bias},
                          [out_len, cin, cout, patch, stride, T, K, C, S](Node& self) {
                              const double* g = self.grad.data.data();
                              const detail::ConstMap gm(g, T, C);
                              if (detail::wants(self, 0)) {
                                  // Windows overlap, so scatter the patch gradients row by row.
                                  const detail::RowMajor dp =
                                      gm * detail::ConstMap(detail::in_value(self, 1).data.data(), K, C).transpose();
                                  double* dx = detail::in_grad(self, 0).data.data();
                                  for (std::size_t t = 0; t < out_len; ++t)
                                      for (std::size_t i = 0; i < patch; ++i)
                                          dx[t * stride * cin + i] += dp(static_cast<Eigen::Index>(t),
                                                                         static_cast<Eigen::Index>(i));
                              }
                              if (detail::wants(self, 1))
                                  detail::MutMap(detail::in_grad(self, 1).data.data(), K, C).noalias() +=
                                      PatchMap(detail::in_value(self, 0).data.data(), T, K, Eigen::OuterStride<>(S))
                                          .transpose() *
                                      gm;
                              if (detail::wants(self, 2)) {
                                  auto& db = detail::in_grad(self, 2).data;
                                  for (std::size_t t = 0; t < out_len; ++t)
                                      for (std::size_t j = 0; j < cout; ++j) db[j] += g[t * cout + j];
                              }
                          });
}

// ---------------------------------------------------------------------------
// Normalizations

// A NaN or infinity reached an op that cannot accept one; training treats it as divergence.
struct NonFiniteValue : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Row-wise softmax of x / divisor over the last axis, max-subtracted.
inline Var softmax_rows(const Var& x, double divisor = 1.0) {
    if (!(divisor > 0.0)) throw std::invalid_argument("softmax_rows: divisor must be positive");
    if (!x.value().all_finite()) throw NonFiniteValue("softmax_rows: non-finite input");
    const std::size_t m = x.cols(), n = x.value().rows();
    Tensor out(x.shape());
    const auto& xv = x.value().data;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * m;
        double* o = out.data.data() + i * m;
        const double mx = *std::max_element(row, row + m);
        double total = 0.0;
        for (std::size_t j = 0; j < m; ++j) total += (o[j] = std::exp((row[j] - mx) / divisor));
        for (std::size_t j = 0; j < m; ++j) o[j] /= total;
    }
    return detail::record("softmax_rows", std::move(out), {x}, [n, m, divisor](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        const auto& y = self.value.data;
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += self.grad[i * m + j] * y[i * m + j];
            for (std::size_t j = 0; j < m; ++j)
                g[i * m + j] += y[i * m + j] * (self.grad[i * m + j] - dot) / divisor;
        }
    });
}

// Row-wise log(softmax(x)) over the last axis.
inline Var log_softmax_rows(const Var& x) {
    if (!x.value().all_finite()) throw NonFiniteValue("log_softmax_rows: non-finite input");
    const std::size_t m = x.cols(), n = x.value().rows();
    Tensor out(x.shape());
    const auto& xv = x.value().data;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * m;
        const double mx = *std::max_element(row, row + m);
        double total = 0.0;
        for (std::size_t j = 0; j < m; ++j) total += std::exp(row[j] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] = row[j] - lse;
    }
    return detail::record("log_softmax_rows", std::move(out), {x}, [n, m](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        const auto& y = self.value.data;
        for (std::size_t i = 0; i < n; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < m; ++j) total += self.grad[i * m + j];
            for (std::size_t j = 0; j < m; ++j)
                g[i * m + j] += self.grad[i * m + j] - std::exp(y[i * m + j]) * total;
        }
    });
}

inline constexpr double kLayerNormEps = 1e-12;

// Normalizes every last-axis vector to zero mean / unit variance, then applies gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = kLayerNormEps) {
    const std::size_t d = x.cols(), n = x.value().rows();
    if (gain.shape() != Shape{d}) detail::shape_error("layer_norm", x.shape(), gain.shape());
    if (bias.shape() != Shape{d}) detail::shape_error("layer_norm", x.shape(), bias.shape());
    if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
    Tensor out(x.shape());
    std::vector<double> xhat(x.value().size());
    std::vector<double> inv_std(n);
    const auto& xv = x.value().data;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (row[j] - mean) * inv_std[i];
            out.data[i * d + j] = xhat[i * d + j] * gain.value()[j] + bias.value()[j];
        }
    }
    return detail::record("layer_norm", std::move(out), {x, gain, bias},
                          [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                              const auto& gv = detail::in_value(self, 1).data;
                              const auto& go = self.grad.data;
                              if (detail::wants(self, 0)) {
                                  auto& dx = detail::in_grad(self, 0).data;
                                  for (std::size_t i = 0; i < n; ++i) {
                                      double s1 = 0.0, s2 = 0.0;
                                      for (std::size_t j = 0; j < d; ++j) {
                                          const double gh = go[i * d + j] * gv[j];
                                          s1 += gh;
                                          s2 += gh * xhat[i * d + j];
                                      }
                                      const double dd = static_cast<double>(d);
                                      for (std::size_t j = 0; j < d; ++j) {
                                          const double gh = go[i * d + j] * gv[j];
                                          dx[i * d + j] += inv_std[i] * (gh - s1 / dd - xhat[i * d + j] * s2 / dd);
                                      }
                                  }
                              }
                              if (detail::wants(self, 1)) {
                                  auto& dg = detail::in_grad(self, 1).data;
                                  for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < d; ++j) dg[j] += go[i * d + j] * xhat[i * d + j];
                              }
                              if (detail::wants(self, 2)) {
                                  auto& db = detail::in_grad(self, 2).data;
                                  for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < d; ++j) db[j] += go[i * d + j];
                              }
                          });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
    double total = 0.0;
    for (double v : x.value().data) total += v;
    return detail::record("sum", Tensor::scalar(total), {x}, [](Node& self) {
        auto& g = detail::in_grad(self, 0).data;
        for (double& v : g) v += self.grad[0];
    });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// Sum of a list of scalars, accumulated left to right.
inline Var sum_scalars(const std::vector<Var>& terms) {
    if (terms.empty()) throw std::invalid_argument("sum_scalars: no terms");
    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return total;
}

// Inverted dropout; identity when rate is zero or training is off.
template <typename Rng>
Var dropout(const Var& x, double rate, bool training, Rng& rng) {
    if (!training || rate <= 0.0) return x;
    if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be below 1");
    std::bernoulli_distribution keep(1.0 - rate);
    Tensor mask(x.shape());
    for (double& v : mask.data) v = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
    return mul(x, constant(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Backward pass

// Nodes reachable from root that carry gradients, in reverse execution order.
inline std::vector<Node*> reverse_topological_order(const Var& root) {
    std::vector<Node*> nodes;
    std::unordered_set<const Node*> seen;
    std::vector<Node*> stack{&root.node()};
    seen.insert(&root.node());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& in : n->inputs)
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
    std::sort(nodes.begin(), nodes.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
    return nodes;
}

// Accumulates d(root)/d(leaf) into every reachable leaf that requires a gradient.
inline void backward(const Var& root) {
    if (root.value().size() != 1)
        throw std::invalid_argument("backward: root must be a scalar, got shape " + to_string(root.shape()));
    if (!root.requires_grad()) return;
    const auto order = reverse_topological_order(root);
    for (Node* n : order)
        if (n->backward_fn) n->grad = Tensor::zeros(n->value.shape);
    root.node().grad_ref()[0] += 1.0;
    for (Node* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

}  // namespace sahr
