#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "sahr/analysis.hpp"
#include "support.hpp"

using namespace sahr;
using sahr::testing::random_tensor;

namespace {

Tensor identity(std::size_t n) {
    Tensor t = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

Tensor random_stochastic(std::size_t n, std::size_t m, Rng& rng) {
    Tensor t = random_tensor({n, m}, rng, 0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += t.at(i, j);
        for (std::size_t j = 0; j < m; ++j) t.at(i, j) /= s;
    }
    return t;
}

// A layers x heads heatmap whose first `above` cells (row-major) sit at 0.97,
// the next `between` at 0.93 and the rest at 0.5.
Heatmap synthetic_heatmap(std::size_t layers, std::size_t heads, std::size_t above, std::size_t between) {
    Heatmap hm;
    hm.layers = layers;
    hm.heads = heads;
    hm.utterances = 1;
    for (std::size_t k = 0; k < layers * heads; ++k) hm.values.push_back(k < above ? 0.97 : k < above + between ? 0.93 : 0.5);
    return hm;
}

double cosine(const Tensor& a, const Tensor& b, std::size_t row) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
        dot += a.at(row, j) * b.at(row, j);
        na += a.at(row, j) * a.at(row, j);
        nb += b.at(row, j) * b.at(row, j);
    }
    return dot / std::sqrt(na * nb);
}

SegmentErrors errors(std::vector<double> e) { return SegmentErrors{std::move(e)}; }

}  // namespace

TEST(Diagonality, Fixtures) {
    for (std::size_t n = 2; n <= 6; ++n) EXPECT_EQ(diagonality(identity(n)), 1.0);
    EXPECT_NEAR(diagonality(Tensor(Shape{4, 4}, 0.25)), 1.0 - 1.25 / 3.0, 1e-12);
    EXPECT_EQ(diagonality(Tensor::matrix(2, 2, {0, 1, 1, 0})), 0.0);
}

TEST(Diagonality, RejectsBadInput) {
    EXPECT_THROW(diagonality(Tensor(Shape{2, 3}, 1.0 / 3.0)), std::invalid_argument);
    EXPECT_THROW(diagonality(Tensor::matrix(2, 2, {0.5, 0.6, 0.5, 0.5})), std::invalid_argument);
}

TEST(Diagonality, BoundedAndReversalInvariant) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(trial % 6);
        const Tensor a = random_stochastic(n, n, rng);
        const double d = diagonality(a);
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
        EXPECT_LT(d, 1.0);  // off-diagonal mass is always positive here
        Tensor r(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) r.at(n - 1 - i, n - 1 - j) = a.at(i, j);
        EXPECT_NEAR(diagonality(r), d, 1e-12);
    }
}

TEST(Heatmap, CellsAreMeansOverUtterances) {
    // diagonality 0.4 and 0.6 for 2x2 matrices: offset mass 0.6 and 0.4 per row.
    const Tensor a = Tensor::matrix(2, 2, {0.4, 0.6, 0.6, 0.4});
    const Tensor b = Tensor::matrix(2, 2, {0.6, 0.4, 0.4, 0.6});
    ASSERT_NEAR(diagonality(a), 0.4, 1e-15);
    const Heatmap hm = build_heatmap({{Site::encoder_self, 0, {a}}, {Site::encoder_self, 0, {b}}});
    EXPECT_EQ(hm.layers, 1u);
    EXPECT_EQ(hm.heads, 1u);
    EXPECT_NEAR(hm.at(0, 0), 0.5, 1e-15);
    const Heatmap single = build_heatmap({{Site::encoder_self, 0, {a}}});
    EXPECT_EQ(single.at(0, 0), diagonality(a));
}

TEST(Heatmap, MatchesBruteForceMeans) {
    Rng rng(2);
    std::vector<AttentionRecord> records;
    for (std::size_t u = 0; u < 5; ++u)
        for (std::size_t l = 0; l < 3; ++l) {
            const std::size_t n = 3 + u;
            records.push_back({Site::encoder_self, l, {}});
            for (std::size_t h = 0; h < 4; ++h) records.back().heads.push_back(random_stochastic(n, n, rng));
        }
    const Heatmap hm = build_heatmap(records);
    for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t h = 0; h < 4; ++h) {
            double total = 0.0;
            for (const auto& r : records)
                if (r.layer == l) total += diagonality(r.heads[h]);
            EXPECT_NEAR(hm.at(l, h), total / 5.0, 1e-12);
        }
    EXPECT_EQ(hm.utterances, 5u);
    std::stringstream csv;
    write_heatmap_csv(csv, hm);
    const Heatmap back = read_heatmap_csv(csv);
    EXPECT_EQ(back.values, hm.values);
    EXPECT_EQ(back.layers, 3u);
}

TEST(Heatmap, RejectsMixedHeadShapes) {
    AttentionRecord r{Site::encoder_self, 0, {identity(2), identity(3)}};
    EXPECT_THROW(build_heatmap({r}), std::invalid_argument);
}

TEST(PrunePlans, TopmostAndThresholdCounts) {
    const PrunePlan top = plan_remove_topmost(12, 4);
    EXPECT_EQ(top.remaining(), 44u);
    const Heatmap hm = synthetic_heatmap(12, 4, 6, 6);
    EXPECT_EQ(plan_from_threshold(hm, 0.95).remaining(), 42u);
    EXPECT_EQ(plan_from_threshold(hm, 0.90).remaining(), 36u);
    EXPECT_EQ(plan_from_threshold(hm, 1.0).remaining(), 48u);
    EXPECT_EQ(plan_from_threshold(hm, 0.0).remaining(), 0u);
}

TEST(PrunePlans, RemainingEqualsTotalMinusCellsAboveTau) {
    Rng rng(3);
    Heatmap hm = synthetic_heatmap(6, 4, 0, 0);
    for (double& v : hm.values) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    for (double tau : {0.1, 0.33, 0.5, 0.9}) {
        std::size_t above = 0;
        for (double v : hm.values) above += v > tau;
        EXPECT_EQ(plan_from_threshold(hm, tau).remaining(), 24u - above);
    }
}

TEST(PrunePlans, FileRoundTrip) {
    PrunePlan plan = plan_from_threshold(synthetic_heatmap(3, 2, 2, 1), 0.95);
    std::stringstream buf;
    write_prune_plan(buf, plan);
    const PrunePlan back = read_prune_plan(buf);
    EXPECT_EQ(back.keep, plan.keep);
    EXPECT_EQ(back.layers, 3u);
    EXPECT_EQ(back.provenance, PlanProvenance::threshold);
}

TEST(Similarity, Fixtures) {
    std::size_t skipped = 0;
    const Tensor a = Tensor::matrix(2, 2, {0.3, 0.7, 0.9, 0.1});
    EXPECT_NEAR(*utterance_head_similarity({a, a}, skipped), 1.0, 1e-15);
    EXPECT_NEAR(*utterance_head_similarity({identity(2), Tensor::matrix(2, 2, {0, 1, 1, 0})}, skipped), 0.0, 1e-15);
    EXPECT_THROW(utterance_head_similarity({a}, skipped), std::invalid_argument);
}

TEST(Similarity, ThreeHeadsMatchPairwiseOracle) {
    const Tensor h0 = Tensor::matrix(2, 2, {0.2, 0.8, 0.5, 0.5});
    const Tensor h1 = Tensor::matrix(2, 2, {0.9, 0.1, 0.3, 0.7});
    const Tensor h2 = Tensor::matrix(2, 2, {0.6, 0.4, 1.0, 0.0});
    double expected = 0.0;
    for (const auto& [x, y] : {std::pair{&h0, &h1}, std::pair{&h0, &h2}, std::pair{&h1, &h2}})
        expected += (cosine(*x, *y, 0) + cosine(*x, *y, 1)) / 2.0;
    expected /= 3.0;
    std::size_t skipped = 0;
    EXPECT_NEAR(*utterance_head_similarity({h0, h1, h2}, skipped), expected, 1e-12);
    EXPECT_NEAR(*utterance_head_similarity({h2, h0, h1}, skipped), expected, 1e-12);
}

TEST(Similarity, ReportAveragesUtterancesPerLayer) {
    Rng rng(4);
    std::vector<AttentionRecord> records;
    std::vector<double> layer0;
    for (std::size_t u = 0; u < 3; ++u) {
        records.push_back({Site::encoder_self, 0, {random_stochastic(4, 4, rng), random_stochastic(4, 4, rng)}});
        std::size_t skipped = 0;
        layer0.push_back(*utterance_head_similarity(records.back().heads, skipped));
        records.push_back({Site::encoder_self, 1, {identity(4), identity(4)}});
    }
    const SimilarityReport rep = head_similarity(records);
    ASSERT_EQ(rep.per_layer.size(), 2u);
    EXPECT_NEAR(rep.per_layer[0], (layer0[0] + layer0[1] + layer0[2]) / 3.0, 1e-15);
    EXPECT_NEAR(rep.per_layer[1], 1.0, 1e-15);
    EXPECT_NEAR(rep.mean, (rep.per_layer[0] + 1.0) / 2.0, 1e-15);
    for (double v : rep.per_layer) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Similarity, ZeroRowsAreSkippedAndCounted) {
    const Tensor a = Tensor::matrix(2, 2, {0, 0, 0.5, 0.5});
    const Tensor b = Tensor::matrix(2, 2, {0.5, 0.5, 0.5, 0.5});
    std::size_t skipped = 0;
    EXPECT_NEAR(*utterance_head_similarity({a, b}, skipped), 1.0, 1e-15);
    EXPECT_EQ(skipped, 1u);
}

TEST(Wer, Fixtures) {
    using S = std::vector<std::string>;
    EXPECT_EQ(edit_distance_wer(S{"a", "b"}, S{"a", "b"}).wer, 0.0);
    const WerResult r = edit_distance_wer(S{"a", "b", "c", "d"}, S{"a", "x", "c"});
    EXPECT_EQ(r.substitutions, 1u);
    EXPECT_EQ(r.deletions, 1u);
    EXPECT_EQ(r.insertions, 0u);
    EXPECT_EQ(r.wer, 0.5);
    const WerResult ins = edit_distance_wer(S{"a"}, S{"a", "b"});
    EXPECT_EQ(ins.insertions, 1u);
    EXPECT_EQ(ins.wer, 1.0);
    const WerResult empty = edit_distance_wer(S{}, S{"a", "b"});
    EXPECT_TRUE(empty.empty_reference);
    EXPECT_EQ(empty.wer, 2.0);
}

TEST(Wer, CorpusSumsSegments) {
    std::stringstream refs("a b c d\nx y\n"), hyps("a x c\nx y z\n");
    const CorpusWer c = corpus_wer(read_transcripts(refs), read_transcripts(hyps));
    EXPECT_EQ(c.total.errors(), 3u);
    EXPECT_EQ(c.total.ref_length, 6u);
    EXPECT_EQ(c.per_segment.errors, (std::vector<double>{2, 1}));
    std::stringstream short_hyps("a\n");
    std::stringstream refs2("a\nb\n");
    EXPECT_THROW(corpus_wer(read_transcripts(refs2), read_transcripts(short_hyps)), std::invalid_argument);
}

TEST(Mapsswe, IdenticalSystems) {
    const MapssweResult r = mapsswe(errors({1, 2, 0}), errors({1, 2, 0}));
    EXPECT_EQ(r.z, 0.0);
    EXPECT_EQ(r.p, 1.0);
    EXPECT_TRUE(r.all_equal);
}

TEST(Mapsswe, SymmetricDifferencesGiveZero) {
    const MapssweResult r = mapsswe(errors({1, 0, 1, 0}), errors({0, 1, 0, 1}));
    EXPECT_EQ(r.z, 0.0);
    EXPECT_EQ(r.p, 1.0);
}

TEST(Mapsswe, HandComputedFixture) {
    const MapssweResult r = mapsswe(errors({1, 1, 1, 2}), errors({0, 0, 0, 0}));
    EXPECT_NEAR(r.mean_difference, 1.25, 1e-15);
    EXPECT_NEAR(r.sd, 0.5, 1e-15);
    EXPECT_NEAR(r.z, 5.0, 1e-12);
    EXPECT_NEAR(r.p, std::erfc(5.0 / std::sqrt(2.0)), 1e-15);
    EXPECT_NEAR(r.p, 5.7e-7, 1e-8);
    const MapssweResult swapped = mapsswe(errors({0, 0, 0, 0}), errors({1, 1, 1, 2}));
    EXPECT_EQ(swapped.z, -r.z);
    EXPECT_EQ(swapped.p, r.p);
}

TEST(Mapsswe, RejectsMismatchedSegmentCounts) {
    EXPECT_THROW(mapsswe(errors({1, 2}), errors({1})), std::invalid_argument);
    EXPECT_THROW(mapsswe(errors({}), errors({})), std::invalid_argument);
}

TEST(Mapsswe, PermutationPValue) {
    // All four differences positive: only the all-positive and all-negative
    // sign patterns reach |sum| = 5, so p = 2/16.
    EXPECT_NEAR(mapsswe_permutation_p(errors({1, 1, 1, 2}), errors({0, 0, 0, 0})), 2.0 / 16.0, 1e-15);
    EXPECT_EQ(mapsswe_permutation_p(errors({1, 2}), errors({1, 2})), 1.0);
}
