#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "sahr/autodiff.hpp"
#include "sahr/model.hpp"

namespace sahr {

// Mean over non-pad positions of the cross-entropy against a target that puts
// 1 - smoothing on the gold token and smoothing / (V - 1) on every other token.
inline Var label_smoothed_ce(const Var& logits, const std::vector<int>& targets, double smoothing,
                             int pad_id = kPad) {
    const std::size_t t = logits.rows(), v = logits.cols();
    if (targets.size() != t)
        throw std::invalid_argument("label_smoothed_ce: " + std::to_string(targets.size()) + " targets for " +
                                    std::to_string(t) + " logit rows");
    if (!(smoothing >= 0.0 && smoothing < 1.0))
        throw std::invalid_argument("label_smoothed_ce: smoothing must lie in [0, 1)");
    if (v < 2 && smoothing > 0.0) throw std::invalid_argument("label_smoothed_ce: smoothing needs V >= 2");
    Tensor dist(Shape{t, v});
    std::size_t counted = 0;
    const double off = v > 1 ? smoothing / static_cast<double>(v - 1) : 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        if (targets[i] == pad_id) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
            throw std::invalid_argument("label_smoothed_ce: target " + std::to_string(targets[i]) +
                                        " outside vocabulary of " + std::to_string(v));
        ++counted;
        for (std::size_t j = 0; j < v; ++j) dist.at(i, j) = off;
        dist.at(i, static_cast<std::size_t>(targets[i])) = 1.0 - smoothing;
    }
    if (counted == 0) throw std::invalid_argument("label_smoothed_ce: every target is padding");
    return scale(sum(mul(log_softmax_rows(logits), constant(std::move(dist)))), -1.0 / static_cast<double>(counted));
}

namespace detail {

inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
    if (a == kLogZero) return b;
    if (b == kLogZero) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace detail

inline constexpr int kCtcBlank = kBlank;

// Frames needed to emit labels: one per label plus a blank between repeats.
inline std::size_t ctc_min_frames(const std::vector<int>& labels) {
    std::size_t need = labels.size();
    for (std::size_t i = 1; i < labels.size(); ++i) need += labels[i] == labels[i - 1];
    return need;
}

// -log P(labels | log_probs) summed over every blank-augmented alignment.
// log_probs is [T x C] of per-frame log posteriors; column 0 is the blank.
inline Var ctc_loss(const Var& log_probs, const std::vector<int>& labels) {
    using detail::kLogZero;
    using detail::log_add;
    detail::require_rank2("ctc_loss", log_probs);
    const std::size_t frames = log_probs.rows(), classes = log_probs.cols();
    for (int l : labels)
        if (l <= kCtcBlank || static_cast<std::size_t>(l) >= classes)
            throw std::invalid_argument("ctc_loss: label " + std::to_string(l) + " outside [1, " +
                                        std::to_string(classes) + ")");
    if (frames < ctc_min_frames(labels))
        throw std::invalid_argument("ctc_loss: " + std::to_string(frames) + " frames cannot emit the labels; need at least " +
                                    std::to_string(ctc_min_frames(labels)));

    std::vector<int> ext(2 * labels.size() + 1, kCtcBlank);
    for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
    const std::size_t s_len = ext.size();
    const auto& lp = log_probs.value().data;
    auto emit = [&](std::size_t t, std::size_t s) { return lp[t * classes + static_cast<std::size_t>(ext[s])]; };
    auto skip_ok = [&](std::size_t s) { return s >= 2 && ext[s] != kCtcBlank && ext[s] != ext[s - 2]; };

    std::vector<double> alpha(frames * s_len, kLogZero);
    alpha[0] = emit(0, 0);
    if (s_len > 1) alpha[1] = emit(0, 1);
    for (std::size_t t = 1; t < frames; ++t)
        for (std::size_t s = 0; s < s_len; ++s) {
            double a = alpha[(t - 1) * s_len + s];
            if (s >= 1) a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            if (skip_ok(s)) a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            if (a != kLogZero) alpha[t * s_len + s] = a + emit(t, s);
        }
    double log_p = alpha[(frames - 1) * s_len + s_len - 1];
    if (s_len > 1) log_p = log_add(log_p, alpha[(frames - 1) * s_len + s_len - 2]);

    return detail::record(
        "ctc_loss", Tensor::scalar(-log_p), {log_probs},
        [ext, alpha = std::move(alpha), log_p, frames, classes, s_len](Node& self) {
            // beta excludes the emission at its own frame.
            std::vector<double> beta(frames * s_len, kLogZero);
            beta[(frames - 1) * s_len + s_len - 1] = 0.0;
            if (s_len > 1) beta[(frames - 1) * s_len + s_len - 2] = 0.0;
            const auto& lp = detail::in_value(self, 0).data;
            auto emit = [&](std::size_t t, std::size_t s) { return lp[t * classes + static_cast<std::size_t>(ext[s])]; };
            for (std::size_t t = frames - 1; t-- > 0;)
                for (std::size_t s = 0; s < s_len; ++s) {
                    double b = beta[(t + 1) * s_len + s] + emit(t + 1, s);
                    if (s + 1 < s_len) b = log_add(b, beta[(t + 1) * s_len + s + 1] + emit(t + 1, s + 1));
                    if (s + 2 < s_len && ext[s + 2] != kCtcBlank && ext[s + 2] != ext[s])
                        b = log_add(b, beta[(t + 1) * s_len + s + 2] + emit(t + 1, s + 2));
                    beta[t * s_len + s] = b;
                }
            auto& g = detail::in_grad(self, 0).data;
            const double go = self.grad[0];
            for (std::size_t t = 0; t < frames; ++t)
                for (std::size_t s = 0; s < s_len; ++s) {
                    const double a = alpha[t * s_len + s], b = beta[t * s_len + s];
                    if (a == kLogZero || b == kLogZero) continue;
                    g[t * classes + static_cast<std::size_t>(ext[s])] -= go * std::exp(a + b - log_p);
                }
        });
}

struct LossReport {
    Var total;
    double decoder_loss = 0.0;
    double ctc_loss = 0.0;
    double lambda = 0.0;
    double token_accuracy = 0.0;
    std::size_t tokens = 0;  // counted decoder positions

    double total_value() const { return total.value()[0]; }
};

// Fraction of non-pad rows whose argmax equals the target.
inline double token_accuracy(const Tensor& logits, const std::vector<int>& targets, int pad_id = kPad) {
    std::size_t hits = 0, counted = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == pad_id) continue;
        ++counted;
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j)
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        hits += static_cast<int>(best) == targets[i];
    }
    return counted ? static_cast<double>(hits) / static_cast<double>(counted) : 0.0;
}

// L = (1 - lambda) L_dec + lambda L_ctc.
inline LossReport joint_loss(const Var& dec_logits, const Var& ctc_log_probs, const std::vector<int>& targets,
                             const std::vector<int>& ctc_labels, double lambda, double smoothing = 0.1) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("joint_loss: lambda must lie in [0, 1], got " + std::to_string(lambda));
    const Var dec = label_smoothed_ce(dec_logits, targets, smoothing);
    const Var ctc = ctc_loss(ctc_log_probs, ctc_labels);
    LossReport r;
    r.total = add(scale(dec, 1.0 - lambda), scale(ctc, lambda));
    r.decoder_loss = dec.value()[0];
    r.ctc_loss = ctc.value()[0];
    r.lambda = lambda;
    r.token_accuracy = token_accuracy(dec_logits.value(), targets);
    for (int t : targets) r.tokens += t != kPad;
    return r;
}

}  // namespace sahr
