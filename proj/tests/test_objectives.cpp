#include <gtest/gtest.h>

#include <cmath>

#include "sahr/objectives.hpp"
#include "support.hpp"

using namespace sahr;
using sahr::testing::gradient_error;
using sahr::testing::random_tensor;

namespace {

// -log of the summed probability of every path that collapses to labels.
double brute_force_ctc(const Tensor& log_probs, const std::vector<int>& labels) {
    const std::size_t t = log_probs.rows(), c = log_probs.cols();
    std::size_t paths = 1;
    for (std::size_t i = 0; i < t; ++i) paths *= c;
    double total = 0.0;
    std::vector<int> path(t);
    for (std::size_t code = 0; code < paths; ++code) {
        std::size_t rest = code;
        for (std::size_t i = 0; i < t; ++i) {
            path[i] = static_cast<int>(rest % c);
            rest /= c;
        }
        std::vector<int> collapsed;
        for (std::size_t i = 0; i < t; ++i)
            if (path[i] != kCtcBlank && (i == 0 || path[i] != path[i - 1])) collapsed.push_back(path[i]);
        if (collapsed != labels) continue;
        double lp = 0.0;
        for (std::size_t i = 0; i < t; ++i) lp += log_probs.at(i, static_cast<std::size_t>(path[i]));
        total += std::exp(lp);
    }
    return -std::log(total);
}

// Every label sequence of length len over symbols 1..v.
std::vector<std::vector<int>> all_labels(std::size_t len, std::size_t v) {
    std::vector<std::vector<int>> out{{}};
    for (std::size_t k = 0; k < len; ++k) {
        std::vector<std::vector<int>> next;
        for (const auto& prefix : out)
            for (std::size_t s = 1; s <= v; ++s) {
                next.push_back(prefix);
                next.back().push_back(static_cast<int>(s));
            }
        out = std::move(next);
    }
    return out;
}

Tensor log_softmax_of(const Tensor& logits) { return log_softmax_rows(constant(logits)).value(); }

}  // namespace

TEST(LabelSmoothedCe, UniformLogitsGiveLogV) {
    for (double s : {0.0, 0.1, 0.5}) {
        const Var logits = constant(Tensor::zeros({3, 5}));
        EXPECT_NEAR(label_smoothed_ce(logits, {0, 4, 2}, s).value()[0], std::log(5.0), 1e-14);
    }
}

TEST(LabelSmoothedCe, HandComputedThreeClass) {
    const Var logits = constant(Tensor::matrix(1, 3, {std::log(1.0), std::log(2.0), std::log(3.0)}));
    const double expected = -(0.9 * std::log(2.0 / 6.0) + 0.05 * std::log(1.0 / 6.0) + 0.05 * std::log(3.0 / 6.0));
    EXPECT_NEAR(label_smoothed_ce(logits, {1}, 0.1).value()[0], expected, 1e-14);
}

TEST(LabelSmoothedCe, ConfidentCorrectLogitsApproachZero) {
    const Var logits = constant(Tensor::matrix(2, 3, {60, 0, 0, 0, 0, 60}));
    EXPECT_LT(label_smoothed_ce(logits, {0, 2}, 0.0).value()[0], 1e-20);
}

TEST(LabelSmoothedCe, PaddingIsExcluded) {
    Rng rng(1);
    const Tensor l = random_tensor({3, 4}, rng);
    const Tensor first = Tensor::matrix(1, 4, {l.data[0], l.data[1], l.data[2], l.data[3]});
    EXPECT_NEAR(label_smoothed_ce(constant(l), {2, kPad, kPad}, 0.1).value()[0],
                label_smoothed_ce(constant(first), {2}, 0.1).value()[0], 1e-15);
    EXPECT_THROW(label_smoothed_ce(constant(l), {kPad, kPad, kPad}, 0.1), std::invalid_argument);
    EXPECT_THROW(label_smoothed_ce(constant(l), {0, 1, 2}, 1.0), std::invalid_argument);
}

TEST(LabelSmoothedCe, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const Var logits = parameter(random_tensor({4, 5}, rng, -2, 2));
        EXPECT_LT(gradient_error({logits}, [&] { return label_smoothed_ce(logits, {1, kPad, 4, 0}, 0.1); }), 1e-5);
    }
}

TEST(Ctc, TwoLabelsTwoFramesUniform) {
    const Tensor lp = Tensor(Shape{2, 3}, std::log(1.0 / 3.0));
    EXPECT_NEAR(ctc_loss(constant(lp), {1, 2}).value()[0], std::log(9.0), 1e-12);
}

TEST(Ctc, EmptyLabelsIsAllBlankPath) {
    Rng rng(2);
    const Tensor lp = log_softmax_of(random_tensor({5, 3}, rng));
    double expected = 0.0;
    for (std::size_t t = 0; t < 5; ++t) expected -= lp.at(t, 0);
    EXPECT_NEAR(ctc_loss(constant(lp), {}).value()[0], expected, 1e-12);
}

TEST(Ctc, RejectsTooFewFramesWithMinimum) {
    const Tensor lp = Tensor(Shape{2, 3}, std::log(1.0 / 3.0));
    EXPECT_EQ(ctc_min_frames({1, 1}), 3u);
    try {
        ctc_loss(constant(lp), {1, 1});
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find('3'), std::string::npos) << e.what();
    }
}

// Exhaustive oracle over T in [1, 6], |labels| in [0, 3], V in [1, 3].
TEST(Ctc, MatchesPathEnumeration) {
    Rng rng(3);
    std::size_t checked = 0;
    for (std::size_t v = 1; v <= 3; ++v)
        for (std::size_t t = 1; t <= 6; ++t) {
            const Tensor lp = log_softmax_of(random_tensor({t, v + 1}, rng, -2, 2));
            for (std::size_t len = 0; len <= 3; ++len)
                for (const auto& labels : all_labels(len, v)) {
                    if (ctc_min_frames(labels) > t) {
                        EXPECT_THROW(ctc_loss(constant(lp), labels), std::invalid_argument);
                        continue;
                    }
                    EXPECT_NEAR(ctc_loss(constant(lp), labels).value()[0], brute_force_ctc(lp, labels), 1e-8);
                    ++checked;
                }
        }
    EXPECT_EQ(checked, 234u);
}

TEST(Ctc, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const Var logits = parameter(random_tensor({6, 4}, rng, -2, 2));
        EXPECT_LT(gradient_error({logits}, [&] { return ctc_loss(log_softmax_rows(logits), {1, 3, 3}); }), 1e-5);
    }
}

TEST(Ctc, InvariantUnderVocabularyRelabeling) {
    Rng rng(4);
    const Tensor lp = log_softmax_of(random_tensor({6, 4}, rng));
    // Swap symbols 1 and 3 in both the labels and the posterior columns.
    Tensor swapped = lp;
    for (std::size_t t = 0; t < 6; ++t) std::swap(swapped.at(t, 1), swapped.at(t, 3));
    EXPECT_NEAR(ctc_loss(constant(lp), {1, 2, 1}).value()[0], ctc_loss(constant(swapped), {3, 2, 3}).value()[0],
                1e-13);
}

TEST(JointLoss, MixesWithLambda) {
    Rng rng(5);
    const Var dec = constant(random_tensor({3, 4}, rng));
    const Var ctc = log_softmax_rows(constant(random_tensor({5, 4}, rng)));
    const std::vector<int> targets{2, 3, 1}, labels{2, 3};
    const LossReport pure_dec = joint_loss(dec, ctc, targets, labels, 0.0);
    EXPECT_EQ(pure_dec.total_value(), pure_dec.decoder_loss);
    const LossReport pure_ctc = joint_loss(dec, ctc, targets, labels, 1.0);
    EXPECT_EQ(pure_ctc.total_value(), pure_ctc.ctc_loss);
    const LossReport mixed = joint_loss(dec, ctc, targets, labels, 0.3);
    EXPECT_NEAR(mixed.total_value(), 0.7 * mixed.decoder_loss + 0.3 * mixed.ctc_loss, 1e-14);
    EXPECT_EQ(mixed.tokens, 3u);
    EXPECT_THROW(joint_loss(dec, ctc, targets, labels, 1.5), std::invalid_argument);
}

TEST(JointLoss, KnownParts) {
    // Uniform decoder logits give ln 3; the two-frame "ab" CTC case gives ln 9.
    const Var dec = constant(Tensor::zeros({2, 3}));
    const Var ctc = constant(Tensor(Shape{2, 3}, std::log(1.0 / 3.0)));
    const LossReport r = joint_loss(dec, ctc, {1, 2}, {1, 2}, 0.3);
    EXPECT_NEAR(r.decoder_loss, std::log(3.0), 1e-14);
    EXPECT_NEAR(r.ctc_loss, std::log(9.0), 1e-14);
    EXPECT_NEAR(r.total_value(), 0.7 * std::log(3.0) + 0.3 * std::log(9.0), 1e-14);
}

TEST(TokenAccuracy, CountsArgmaxMatchesOverNonPad) {
    const Tensor logits = Tensor::matrix(3, 2, {1, 0, 0, 1, 1, 0});
    EXPECT_DOUBLE_EQ(token_accuracy(logits, {0, 0, kPad}), 0.5);
}
