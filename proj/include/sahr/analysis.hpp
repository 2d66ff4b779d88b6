#pragma once

// Attention diagnostics and scoring: diagonality heatmaps, threshold pruning
// plans, inter-head similarity, edit-distance error rates and the matched-pairs
// sentence-segment word error (MAPSSWE) significance test.

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sahr/attention.hpp"
#include "sahr/prune_plan.hpp"

namespace sahr {

// ---------------------------------------------------------------------------
// Diagonality

// 1 - m(A) / (n - 1) with m(A) the mean over rows of the attended absolute
// offset sum_j A_ij |i - j|. Identity maps score 1; mass at the largest
// possible offset scores 0. A 1x1 matrix scores 1.
inline double diagonality(const Tensor& a, double tol = 1e-9) {
    if (a.rank() != 2 || a.shape[0] != a.shape[1])
        throw std::invalid_argument("diagonality: expected a square matrix, got " + to_string(a.shape));
    check_row_stochastic(a, tol, "diagonality");
    const std::size_t n = a.shape[0];
    if (n == 1) return 1.0;
    double offset = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            offset += a.at(i, j) * static_cast<double>(i > j ? i - j : j - i);
    const double d = 1.0 - offset / static_cast<double>(n) / static_cast<double>(n - 1);
    return std::clamp(d, 0.0, 1.0);
}

struct Heatmap {
    Site site = Site::encoder_self;
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::vector<double> values;  // [layers x heads]
    std::size_t utterances = 0;  // records averaged per layer

    double at(std::size_t l, std::size_t h) const { return values[l * heads + h]; }
};

// Mean diagonality per (layer, head) over every record of a self-attention site.
inline Heatmap build_heatmap(const std::vector<AttentionRecord>& records) {
    if (records.empty()) throw std::invalid_argument("build_heatmap: no records");
    Heatmap hm;
    hm.site = records.front().site;
    if (hm.site == Site::decoder_inter)
        throw std::invalid_argument("build_heatmap: decoder-inter attention is not square");
    hm.heads = records.front().heads.size();
    for (const auto& r : records) {
        if (r.site != hm.site) throw std::invalid_argument("build_heatmap: records mix attention sites");
        if (r.heads.size() != hm.heads)
            throw std::invalid_argument("build_heatmap: records disagree on head count (" +
                                        std::to_string(hm.heads) + " vs " + std::to_string(r.heads.size()) + ")");
        for (const auto& h : r.heads)
            if (h.shape != r.heads.front().shape)
                throw std::invalid_argument("build_heatmap: heads of one record differ in shape");
        hm.layers = std::max(hm.layers, r.layer + 1);
    }
    std::vector<double> sums(hm.layers * hm.heads, 0.0);
    std::vector<std::size_t> counts(hm.layers, 0);
    for (const auto& r : records) {
        ++counts[r.layer];
        for (std::size_t h = 0; h < hm.heads; ++h) sums[r.layer * hm.heads + h] += diagonality(r.heads[h]);
    }
    for (std::size_t l = 0; l < hm.layers; ++l)
        if (counts[l] == 0) throw std::invalid_argument("build_heatmap: no record for layer " + std::to_string(l));
    hm.values.resize(sums.size());
    for (std::size_t i = 0; i < sums.size(); ++i) hm.values[i] = sums[i] / static_cast<double>(counts[i / hm.heads]);
    hm.utterances = *std::min_element(counts.begin(), counts.end());
    return hm;
}

// CSV with a "# site=<name> utterances=<n>" comment and layer,head,diagonality rows.
inline void write_heatmap_csv(std::ostream& os, const Heatmap& hm) {
    os << "# site=" << site_name(hm.site) << " utterances=" << hm.utterances << '\n';
    os << "layer,head,diagonality\n";
    os.precision(17);
    for (std::size_t l = 0; l < hm.layers; ++l)
        for (std::size_t h = 0; h < hm.heads; ++h) os << l << ',' << h << ',' << hm.at(l, h) << '\n';
}

// Whitespace matrix, one layer per line, for gnuplot's "matrix" plotting.
inline void write_heatmap_matrix(std::ostream& os, const Heatmap& hm) {
    os.precision(17);
    for (std::size_t l = 0; l < hm.layers; ++l) {
        for (std::size_t h = 0; h < hm.heads; ++h) os << (h ? " " : "") << hm.at(l, h);
        os << '\n';
    }
}

inline Heatmap read_heatmap_csv(std::istream& is) {
    Heatmap hm;
    std::map<std::pair<std::size_t, std::size_t>, double> cells;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream cs(line.substr(1));
            std::string kv;
            while (cs >> kv) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) continue;
                const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
                if (key == "site") hm.site = parse_site(value);
                if (key == "utterances") hm.utterances = std::stoul(value);
            }
            continue;
        }
        if (line.rfind("layer", 0) == 0) continue;
        std::istringstream ls(line);
        std::size_t l = 0, h = 0;
        double v = 0.0;
        char c1 = 0, c2 = 0;
        if (!(ls >> l >> c1 >> h >> c2 >> v) || c1 != ',' || c2 != ',')
            throw std::invalid_argument("heatmap csv line " + std::to_string(lineno) + ": expected layer,head,value");
        if (!(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument("heatmap csv line " + std::to_string(lineno) + ": value outside [0, 1]");
        cells[{l, h}] = v;
        hm.layers = std::max(hm.layers, l + 1);
        hm.heads = std::max(hm.heads, h + 1);
    }
    if (cells.size() != hm.layers * hm.heads || cells.empty())
        throw std::invalid_argument("heatmap csv: grid is incomplete");
    hm.values.resize(hm.layers * hm.heads);
    for (const auto& [key, v] : cells) hm.values[key.first * hm.heads + key.second] = v;
    return hm;
}

// Keeps cell (l, h) iff its averaged diagonality is at most tau.
inline PrunePlan plan_from_threshold(const Heatmap& hm, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0))
        throw std::invalid_argument("plan_from_threshold: tau must lie in [0, 1]");
    PrunePlan plan = PrunePlan::keep_all(hm.layers, hm.heads, hm.site);
    for (std::size_t l = 0; l < hm.layers; ++l)
        for (std::size_t h = 0; h < hm.heads; ++h) plan.set(l, h, hm.at(l, h) <= tau);
    plan.provenance = PlanProvenance::threshold;
    plan.tau = tau;
    return plan;
}

// ---------------------------------------------------------------------------
// Inter-head similarity

struct SimilarityReport {
    Site site = Site::encoder_self;
    std::vector<double> per_layer;             // mean over utterances of the pair-averaged similarity
    std::vector<std::size_t> utterances;       // records contributing per layer
    std::size_t skipped_rows = 0;              // row pairs with a zero vector
    double mean = 0.0;                         // mean of per_layer over layers with data
};

namespace detail {

// Mean row-wise cosine similarity of two equally shaped matrices; nullopt if every row pair was skipped.
inline std::optional<double> matrix_row_cosine(const Tensor& a, const Tensor& b, std::size_t& skipped) {
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            dot += a.at(i, j) * b.at(i, j);
            na += a.at(i, j) * a.at(i, j);
            nb += b.at(i, j) * b.at(i, j);
        }
        if (na == 0.0 || nb == 0.0) {
            ++skipped;
            continue;
        }
        total += dot / (std::sqrt(na) * std::sqrt(nb));
        ++used;
    }
    if (used == 0) return std::nullopt;
    return total / static_cast<double>(used);
}

}  // namespace detail

// Pair-averaged row cosine similarity of the heads of one utterance.
inline std::optional<double> utterance_head_similarity(const std::vector<Tensor>& heads, std::size_t& skipped) {
    if (heads.size() < 2) throw std::invalid_argument("head_similarity: need at least two heads");
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < heads.size(); ++a)
        for (std::size_t b = a + 1; b < heads.size(); ++b) {
            if (heads[a].shape != heads[b].shape)
                throw std::invalid_argument("head_similarity: heads differ in shape");
            if (auto s = detail::matrix_row_cosine(heads[a], heads[b], skipped)) {
                total += *s;
                ++pairs;
            }
        }
    if (pairs == 0) return std::nullopt;
    return total / static_cast<double>(pairs);
}

// Averages over rows, then head pairs, then utterances, separately per layer.
inline SimilarityReport head_similarity(const std::vector<AttentionRecord>& records) {
    if (records.empty()) throw std::invalid_argument("head_similarity: no records");
    SimilarityReport rep;
    rep.site = records.front().site;
    std::size_t layers = 0;
    for (const auto& r : records) {
        if (r.site != rep.site) throw std::invalid_argument("head_similarity: records mix attention sites");
        layers = std::max(layers, r.layer + 1);
    }
    std::vector<double> sums(layers, 0.0);
    rep.utterances.assign(layers, 0);
    for (const auto& r : records) {
        if (auto s = utterance_head_similarity(r.heads, rep.skipped_rows)) {
            sums[r.layer] += *s;
            ++rep.utterances[r.layer];
        }
    }
    rep.per_layer.assign(layers, 0.0);
    std::size_t with_data = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        if (rep.utterances[l] == 0) continue;
        rep.per_layer[l] = sums[l] / static_cast<double>(rep.utterances[l]);
        rep.mean += rep.per_layer[l];
        ++with_data;
    }
    if (with_data) rep.mean /= static_cast<double>(with_data);
    return rep;
}

inline void write_similarity_csv(std::ostream& os, const SimilarityReport& rep) {
    os << "# site=" << site_name(rep.site) << " skipped_rows=" << rep.skipped_rows << '\n';
    os << "layer,similarity,utterances\n";
    os.precision(17);
    for (std::size_t l = 0; l < rep.per_layer.size(); ++l)
        os << l << ',' << rep.per_layer[l] << ',' << rep.utterances[l] << '\n';
}

// ---------------------------------------------------------------------------
// Error rates

struct WerResult {
    double wer = 0.0;
    std::size_t substitutions = 0;
    std::size_t deletions = 0;
    std::size_t insertions = 0;
    std::size_t ref_length = 0;
    bool empty_reference = false;  // rate divided by max(1, 0)

    std::size_t errors() const { return substitutions + deletions + insertions; }
};

// Unit-cost Levenshtein alignment. Ties in the backtrace prefer a diagonal
// step, then a deletion, then an insertion.
template <typename T>
WerResult edit_distance_wer(const std::vector<T>& ref, const std::vector<T>& hyp) {
    const std::size_t n = ref.size(), m = hyp.size();
    std::vector<std::size_t> cost((n + 1) * (m + 1));
    auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return cost[i * (m + 1) + j]; };
    for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
    for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j)
            at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0u : 1u), at(i - 1, j) + 1,
                                 at(i, j - 1) + 1});
    WerResult r;
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0u : 1u)) {
            r.substitutions += ref[i - 1] != hyp[j - 1];
            --i;
            --j;
        } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
            ++r.deletions;
            --i;
        } else {
            ++r.insertions;
            --j;
        }
    }
    r.ref_length = n;
    r.empty_reference = n == 0;
    r.wer = static_cast<double>(r.errors()) / static_cast<double>(std::max<std::size_t>(1, n));
    return r;
}

// Transcripts: one segment per line, tokens separated by whitespace.
inline std::vector<std::vector<std::string>> read_transcripts(std::istream& is) {
    std::vector<std::vector<std::string>> out;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::vector<std::string> tokens;
        for (std::string t; ls >> t;) tokens.push_back(t);
        out.push_back(std::move(tokens));
    }
    return out;
}

template <typename T>
void write_transcripts(std::ostream& os, const std::vector<std::vector<T>>& segments) {
    for (const auto& seg : segments) {
        for (std::size_t i = 0; i < seg.size(); ++i) os << (i ? " " : "") << seg[i];
        os << '\n';
    }
}

struct SegmentErrors {
    std::vector<double> errors;  // one count per segment
};

struct CorpusWer {
    WerResult total;  // summed counts, rate over the summed reference length
    SegmentErrors per_segment;
};

template <typename T>
CorpusWer corpus_wer(const std::vector<std::vector<T>>& refs, const std::vector<std::vector<T>>& hyps) {
    if (refs.size() != hyps.size())
        throw std::invalid_argument("wer: " + std::to_string(refs.size()) + " reference segments but " +
                                    std::to_string(hyps.size()) + " hypothesis segments");
    CorpusWer c;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const WerResult r = edit_distance_wer(refs[i], hyps[i]);
        c.total.substitutions += r.substitutions;
        c.total.deletions += r.deletions;
        c.total.insertions += r.insertions;
        c.total.ref_length += r.ref_length;
        c.per_segment.errors.push_back(static_cast<double>(r.errors()));
    }
    c.total.empty_reference = c.total.ref_length == 0;
    c.total.wer = static_cast<double>(c.total.errors()) / static_cast<double>(std::max<std::size_t>(1, c.total.ref_length));
    return c;
}

// ---------------------------------------------------------------------------
// MAPSSWE significance test

struct MapssweResult {
    double z = 0.0;
    double p = 1.0;  // two-sided
    double mean_difference = 0.0;
    double sd = 0.0;  // sample standard deviation of the differences
    std::size_t segments = 0;
    bool all_equal = false;  // every difference zero; z = 0 and p = 1 by convention
};

inline double two_sided_normal_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

namespace detail {

inline std::vector<double> segment_differences(const SegmentErrors& a, const SegmentErrors& b) {
    if (a.errors.size() != b.errors.size())
        throw std::invalid_argument("mapsswe: systems have " + std::to_string(a.errors.size()) + " and " +
                                    std::to_string(b.errors.size()) + " segments");
    if (a.errors.empty()) throw std::invalid_argument("mapsswe: no segments");
    std::vector<double> d(a.errors.size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = a.errors[k] - b.errors[k];
    return d;
}

}  // namespace detail

// z = mean(d) / (sd(d) / sqrt(K)) over per-segment differences d = errA - errB,
// with a two-sided p-value from the standard normal.
inline MapssweResult mapsswe(const SegmentErrors& a, const SegmentErrors& b) {
    const std::vector<double> d = detail::segment_differences(a, b);
    MapssweResult r;
    r.segments = d.size();
    r.all_equal = std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; });
    if (r.all_equal) return r;
    if (d.size() < 2) throw std::invalid_argument("mapsswe: a nonzero difference needs at least two segments");
    const double k = static_cast<double>(d.size());
    for (double v : d) r.mean_difference += v;
    r.mean_difference /= k;
    double ss = 0.0;
    for (double v : d) ss += (v - r.mean_difference) * (v - r.mean_difference);
    r.sd = std::sqrt(ss / (k - 1.0));
    if (r.mean_difference == 0.0) {
        r.z = 0.0;
    } else if (r.sd == 0.0) {
        r.z = std::copysign(std::numeric_limits<double>::infinity(), r.mean_difference);
    } else {
        r.z = r.mean_difference / (r.sd / std::sqrt(k));
    }
    r.p = two_sided_normal_p(r.z);
    return r;
}

// Sign-flip permutation p-value for the mean difference: exact enumeration
// for up to 20 segments, otherwise `draws` seeded random flips.
inline double mapsswe_permutation_p(const SegmentErrors& a, const SegmentErrors& b, std::uint64_t seed = 1,
                                    std::size_t draws = 100000) {
    const std::vector<double> d = detail::segment_differences(a, b);
    double observed = 0.0;
    for (double v : d) observed += v;
    observed = std::abs(observed);
    const double tol = 1e-9 * std::max(1.0, observed);
    std::size_t extreme = 0, total = 0;
    auto count = [&](auto&& sign) {
        double s = 0.0;
        for (std::size_t k = 0; k < d.size(); ++k) s += sign(k) ? d[k] : -d[k];
        extreme += std::abs(s) >= observed - tol;
        ++total;
    };
    if (d.size() <= 20) {
        for (std::uint64_t bits = 0; bits < (std::uint64_t{1} << d.size()); ++bits)
            count([bits](std::size_t k) { return (bits >> k) & 1u; });
    } else {
        std::mt19937_64 rng(seed);
        std::bernoulli_distribution flip(0.5);
        std::vector<bool> signs(d.size());
        for (std::size_t i = 0; i < draws; ++i) {
            for (std::size_t k = 0; k < d.size(); ++k) signs[k] = flip(rng);
            count([&signs](std::size_t k) { return signs[k]; });
        }
    }
    return static_cast<double>(extreme) / static_cast<double>(total);
}

}  // namespace sahr
