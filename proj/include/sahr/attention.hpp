#pragma once

// Scaled dot-product attention heads, multi-head attention and stochastic
// attention head removal.
//
// During training every head of every example is removed independently with
// probability q; surviving heads are scaled by 1 / (1 - q). At evaluation time
// all heads are present and unscaled, so the expected training output equals
// the evaluation output.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sahr/autodiff.hpp"
#include "sahr/random.hpp"

namespace sahr {

// Large negative logit used instead of -inf for masked key positions.
inline constexpr double kMaskedLogit = -1e30;

struct HeadParams {
    Var w_q;  // [d_model x d_k]
    Var w_k;  // [d_model x d_k]
    Var w_v;  // [d_model x d_v]
};

struct MhaParams {
    std::vector<HeadParams> heads;
    Var u_h;  // [(h * d_v) x d_model]

    std::size_t num_heads() const { return heads.size(); }
    std::size_t d_model() const { return heads.front().w_q.shape()[0]; }
    std::size_t d_k() const { return heads.front().w_q.shape()[1]; }
    std::size_t d_v() const { return heads.front().w_v.shape()[1]; }

    void validate() const {
        if (heads.empty()) throw std::invalid_argument("mha: at least one head required");
        const Shape q{d_model(), d_k()}, v{d_model(), d_v()};
        for (const auto& h : heads) {
            if (h.w_q.shape() != q || h.w_k.shape() != q)
                throw std::invalid_argument("mha: inconsistent query/key projection shapes");
            if (h.w_v.shape() != v) throw std::invalid_argument("mha: inconsistent value projection shapes");
        }
        if (u_h.shape() != Shape{num_heads() * d_v(), d_model()})
            throw std::invalid_argument("mha: output projection must be " +
                                        to_string(Shape{num_heads() * d_v(), d_model()}) + ", got " +
                                        to_string(u_h.shape()));
    }
};

inline MhaParams init_mha(std::size_t d_model, std::size_t heads, std::size_t d_k, std::size_t d_v, Rng& rng) {
    MhaParams p;
    for (std::size_t i = 0; i < heads; ++i) {
        p.heads.push_back({parameter(xavier_uniform({d_model, d_k}, d_model, d_k, rng)),
                           parameter(xavier_uniform({d_model, d_k}, d_model, d_k, rng)),
                           parameter(xavier_uniform({d_model, d_v}, d_model, d_v, rng))});
    }
    p.u_h = parameter(xavier_uniform({heads * d_v, d_model}, heads * d_v, d_model, rng));
    return p;
}

enum class Mode { train, eval };

struct RemovalPolicy {
    double q = 0.0;
    Mode mode = Mode::eval;

    void validate() const {
        if (!(q >= 0.0 && q < 1.0))
            throw std::invalid_argument("removal policy: q must lie in [0, 1), got " + std::to_string(q));
    }

    // Multiplier for a kept head.
    double keep_scale() const { return mode == Mode::train ? 1.0 / (1.0 - q) : 1.0; }
};

// Per-example head keep decisions for one multi-head attention instance.
struct RemovalMask {
    std::size_t batch = 0;
    std::size_t heads = 0;
    std::vector<bool> keep;  // row-major [batch x heads]

    bool at(std::size_t b, std::size_t h) const { return keep[b * heads + h]; }

    std::vector<bool> row(std::size_t b) const {
        return {keep.begin() + static_cast<std::ptrdiff_t>(b * heads),
                keep.begin() + static_cast<std::ptrdiff_t>((b + 1) * heads)};
    }

    std::size_t kept() const {
        std::size_t n = 0;
        for (bool k : keep) n += k;
        return n;
    }
};

// In train mode consumes exactly batch * heads uniform draws from rng; eval mode consumes none.
inline RemovalMask sample_removal_mask(const RemovalPolicy& policy, std::size_t batch, std::size_t heads,
                                       Rng& rng) {
    policy.validate();
    RemovalMask mask{batch, heads, std::vector<bool>(batch * heads, true)};
    if (policy.mode == Mode::eval) return mask;
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (std::size_t i = 0; i < batch * heads; ++i) mask.keep[i] = uniform(rng) >= policy.q;
    return mask;
}

// Per-head output multipliers for one example: removal decision times 1/(1-q)
// in training, one at evaluation, and zero for structurally pruned heads.
inline std::vector<double> head_gates(const RemovalPolicy& policy, const std::vector<bool>& keep,
                                      const std::vector<bool>* structural = nullptr) {
    std::vector<double> gates(keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) {
        double g = policy.mode == Mode::train ? (keep[i] ? policy.keep_scale() : 0.0) : 1.0;
        if (structural && !(*structural)[i]) g = 0.0;
        gates[i] = g;
    }
    return gates;
}

struct AttentionMasks {
    std::optional<std::vector<bool>> key_padding;  // [m], true marks a padded key
    bool causal = false;                           // query i may not see keys j > i
};

struct HeadOutput {
    Var out;   // [n x d_v]
    Var attn;  // [n x m], rows sum to one over visible keys
};

namespace detail {

inline std::vector<bool> logit_mask(std::size_t n, std::size_t m, const AttentionMasks& masks) {
    if (masks.key_padding && masks.key_padding->size() != m)
        throw std::invalid_argument(concat("attention: key padding mask has ", masks.key_padding->size(),
                                           " entries for ", m, " keys"));
    std::vector<bool> hidden(n * m, false);
    for (std::size_t i = 0; i < n; ++i) {
        bool any_visible = false;
        for (std::size_t j = 0; j < m; ++j) {
            const bool h = (masks.causal && j > i) || (masks.key_padding && (*masks.key_padding)[j]);
            hidden[i * m + j] = h;
            any_visible = any_visible || !h;
        }
        if (!any_visible) throw std::invalid_argument(concat("attention: query row ", i, " has no visible key"));
    }
    return hidden;
}

inline bool any_set(const std::vector<bool>& v) {
    for (bool b : v)
        if (b) return true;
    return false;
}

inline HeadOutput head_forward(const HeadParams& p, const Var& xq, const Var& xk, const Var& xv,
                               const std::vector<bool>& hidden, double divisor) {
    const Var q = matmul(xq, p.w_q);
    const Var k = matmul(xk, p.w_k);
    const Var v = matmul(xv, p.w_v);
    Var logits = matmul(q, transpose(k));
    if (any_set(hidden)) logits = masked_fill(logits, hidden, kMaskedLogit);
    Var attn = softmax_rows(logits, divisor);
    return {matmul(attn, v), attn};
}

}  // namespace detail

// softmax(Q K^T / sqrt(d_k)) V with Q = Xq Wq, K = Xk Wk, V = Xv Wv.
inline HeadOutput attention_head_forward(const HeadParams& params, const Var& xq, const Var& xk, const Var& xv,
                                         const AttentionMasks& masks = {}) {
    if (xk.shape()[0] != xv.shape()[0]) detail::shape_error("attention_head_forward", xk.shape(), xv.shape());
    const auto hidden = detail::logit_mask(xq.shape()[0], xk.shape()[0], masks);
    return detail::head_forward(params, xq, xk, xv, hidden,
                                std::sqrt(static_cast<double>(params.w_q.shape()[1])));
}

enum class Site { encoder_self, decoder_self, decoder_inter };

inline const char* site_name(Site s) {
    switch (s) {
        case Site::encoder_self: return "encoder-self";
        case Site::decoder_self: return "decoder-self";
        case Site::decoder_inter: return "decoder-inter";
    }
    return "?";
}

inline Site parse_site(const std::string& name) {
    if (name == "encoder-self") return Site::encoder_self;
    if (name == "decoder-self") return Site::decoder_self;
    if (name == "decoder-inter") return Site::decoder_inter;
    throw std::invalid_argument("unknown attention site '" + name + "'");
}

// Post-softmax attention matrices of every head of one MHA instance for one utterance.
struct AttentionRecord {
    Site site = Site::encoder_self;
    std::size_t layer = 0;
    std::vector<Tensor> heads;  // each [n x m]

    std::size_t rows() const { return heads.front().shape[0]; }
    std::size_t cols() const { return heads.front().shape[1]; }
};

struct MhaResult {
    Var out;  // [n x d_model], before the residual connection
    std::optional<AttentionRecord> record;
};

// (A_1 g_1, ..., A_h g_h) U_h where g_i is the gate of head i. A zero gate
// makes the head contribute an exactly-zero column block.
inline MhaResult mha_forward(const MhaParams& params, const Var& xq, const Var& xk, const Var& xv,
                             const AttentionMasks& masks, const std::vector<double>& gates, bool capture = false,
                             Site site = Site::encoder_self, std::size_t layer = 0) {
    if (gates.size() != params.num_heads())
        throw std::invalid_argument(detail::concat("mha_forward: ", gates.size(), " gates for ",
                                                   params.num_heads(), " heads"));
    if (xk.shape()[0] != xv.shape()[0]) detail::shape_error("mha_forward", xk.shape(), xv.shape());
    const auto hidden = detail::logit_mask(xq.shape()[0], xk.shape()[0], masks);
    const double divisor = std::sqrt(static_cast<double>(params.d_k()));
    std::vector<Var> parts;
    parts.reserve(params.num_heads());
    MhaResult result;
    if (capture) result.record = AttentionRecord{site, layer, {}};
    for (std::size_t i = 0; i < params.num_heads(); ++i) {
        HeadOutput head = detail::head_forward(params.heads[i], xq, xk, xv, hidden, divisor);
        if (capture) result.record->heads.push_back(head.attn.value());
        parts.push_back(gates[i] == 1.0 ? head.out : scale(head.out, gates[i]));
    }
    result.out = matmul(parts.size() == 1 ? parts.front() : concat_cols(parts), params.u_h);
    return result;
}

// Samples a single-example mask from policy and applies it.
inline MhaResult mha_forward(const MhaParams& params, const Var& xq, const Var& xk, const Var& xv,
                             const AttentionMasks& masks, const RemovalPolicy& policy, Rng& rng,
                             bool capture = false) {
    const RemovalMask mask = sample_removal_mask(policy, 1, params.num_heads(), rng);
    return mha_forward(params, xq, xk, xv, masks, head_gates(policy, mask.row(0)), capture);
}

// Per-head matrices handed to similarity analysis, exported as captured.
struct SimilarityInputs {
    Site site;
    std::size_t layer;
    std::vector<Tensor> heads;
};

inline void check_row_stochastic(const Tensor& a, double tol, const char* who) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a.at(i, j);
        if (std::abs(s - 1.0) > tol)
            throw std::invalid_argument(detail::concat(who, ": row ", i, " sums to ", s));
    }
}

inline SimilarityInputs capture_similarity_inputs(const AttentionRecord& record) {
    if (record.heads.empty()) throw std::invalid_argument("capture_similarity_inputs: empty record");
    for (const auto& h : record.heads) check_row_stochastic(h, 1e-9, "capture_similarity_inputs");
    return {record.site, record.layer, record.heads};
}

// ---------------------------------------------------------------------------
// Attention dump files.
//
// A dump is a sequence of blocks. Each block is the 8 bytes "ATTNDMP1", an
// ASCII header line "<site> <layer> <heads> <n> <m>\n", then heads * n * m
// little-endian IEEE-754 doubles (head-major, row-major within a head).

inline constexpr char kDumpMagic[8] = {'A', 'T', 'T', 'N', 'D', 'M', 'P', '1'};

namespace detail {

inline void write_le_double(std::ostream& os, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
    os.write(bytes, 8);
}

inline bool read_le_double(std::istream& is, double& v) {
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8)) return false;
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    v = std::bit_cast<double>(bits);
    return true;
}

}  // namespace detail

struct DumpFormatError : std::runtime_error {
    std::size_t offset;
    DumpFormatError(const std::string& what, std::size_t off)
        : std::runtime_error(what + " at byte offset " + std::to_string(off)), offset(off) {}
};

inline void write_attention_dump(std::ostream& os, const AttentionRecord& record) {
    if (record.heads.empty()) throw std::invalid_argument("write_attention_dump: empty record");
    os.write(kDumpMagic, 8);
    os << site_name(record.site) << ' ' << record.layer << ' ' << record.heads.size() << ' ' << record.rows()
       << ' ' << record.cols() << '\n';
    for (const auto& h : record.heads) {
        if (h.shape != record.heads.front().shape)
            throw std::invalid_argument("write_attention_dump: heads of one record must share a shape");
        for (double v : h.data) detail::write_le_double(os, v);
    }
}

inline std::vector<AttentionRecord> read_attention_dump(std::istream& is) {
    std::vector<AttentionRecord> out;
    std::size_t offset = 0;
    while (true) {
        char magic[8];
        is.read(magic, 8);
        if (is.gcount() == 0) break;
        if (is.gcount() != 8 || !std::equal(magic, magic + 8, kDumpMagic))
            throw DumpFormatError("attention dump: bad magic", offset);
        offset += 8;
        std::string header;
        if (!std::getline(is, header)) throw DumpFormatError("attention dump: missing header", offset);
        std::istringstream hs(header);
        std::string site;
        std::size_t layer = 0, heads = 0, n = 0, m = 0;
        if (!(hs >> site >> layer >> heads >> n >> m) || heads == 0 || n == 0 || m == 0)
            throw DumpFormatError("attention dump: malformed header '" + header + "'", offset);
        AttentionRecord rec;
        try {
            rec.site = parse_site(site);
        } catch (const std::invalid_argument& e) {
            throw DumpFormatError(e.what(), offset);
        }
        offset += header.size() + 1;
        rec.layer = layer;
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor t(Shape{n, m});
            for (double& v : t.data) {
                if (!detail::read_le_double(is, v)) throw DumpFormatError("attention dump: truncated matrix", offset);
                offset += 8;
            }
            rec.heads.push_back(std::move(t));
        }
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace sahr
