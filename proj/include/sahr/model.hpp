#pragma once

// Encoder-decoder speech models built from multi-head attention layers.
//
// The encoder is either a stack of pre-norm Transformer layers or Conformer
// blocks; the decoder is always a pre-norm Transformer decoder. A two-layer
// strided convolution frontend subsamples input frames by four. The encoder
// output feeds both a CTC projection and the decoder's inter-attention.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sahr/attention.hpp"
#include "sahr/autodiff.hpp"
#include "sahr/prune_plan.hpp"
#include "sahr/random.hpp"

namespace sahr {

inline constexpr int kBlank = 0;  // CTC blank; also fills padded decoder inputs
inline constexpr int kSos = 1;    // start and end of sentence share one id
inline constexpr int kEos = 1;
inline constexpr int kFirstToken = 2;  // first id usable for data symbols
inline constexpr int kPad = -1;        // padded target position

enum class BlockKind { transformer, conformer };

inline const char* block_kind_name(BlockKind k) { return k == BlockKind::transformer ? "transformer" : "conformer"; }

struct ModelConfig {
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 2;
    std::size_t heads = 4;
    std::size_t d_model = 64;
    std::size_t d_k = 16;
    std::size_t d_v = 16;
    std::size_t d_ff = 256;
    std::size_t conv_kernel = 7;
    std::size_t vocab_size = 8;
    std::size_t input_dim = 16;
    BlockKind block_kind = BlockKind::transformer;
    double dropout_rate = 0.1;
    double sahr_q = 0.0;
    // Per-site overrides of sahr_q; negative means "use sahr_q".
    double q_encoder_self = -1.0;
    double q_decoder_self = -1.0;
    double q_decoder_inter = -1.0;
    double lambda_ctc = 0.3;
    std::optional<PrunePlan> prune_plan;

    double site_q(Site site) const {
        double q = site == Site::encoder_self   ? q_encoder_self
                   : site == Site::decoder_self ? q_decoder_self
                                                : q_decoder_inter;
        return q < 0.0 ? sahr_q : q;
    }

    std::size_t layers_at(Site site) const { return site == Site::encoder_self ? enc_layers : dec_layers; }

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw std::invalid_argument(std::string("model config: ") + name + " must be positive");
        };
        positive(enc_layers, "enc_layers");
        positive(heads, "heads");
        positive(d_model, "d_model");
        positive(d_k, "d_k");
        positive(d_v, "d_v");
        positive(d_ff, "d_ff");
        positive(input_dim, "input_dim");
        if (d_model % 2 != 0) throw std::invalid_argument("model config: d_model must be even");
        if (conv_kernel % 2 == 0) throw std::invalid_argument("model config: conv_kernel must be odd");
        if (vocab_size <= static_cast<std::size_t>(kFirstToken))
            throw std::invalid_argument("model config: vocab_size must exceed the special symbols");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw std::invalid_argument("model config: dropout_rate must lie in [0, 1)");
        for (Site s : {Site::encoder_self, Site::decoder_self, Site::decoder_inter}) {
            const double q = site_q(s);
            if (!(q >= 0.0 && q < 1.0))
                throw std::invalid_argument(std::string("model config: removal probability for ") + site_name(s) +
                                            " must lie in [0, 1)");
        }
        if (!(lambda_ctc >= 0.0 && lambda_ctc <= 1.0))
            throw std::invalid_argument("model config: lambda_ctc must lie in [0, 1]");
        if (prune_plan) {
            if (prune_plan->layers != layers_at(prune_plan->site) || prune_plan->heads != heads)
                throw std::invalid_argument("model config: prune plan grid " + std::to_string(prune_plan->layers) +
                                            "x" + std::to_string(prune_plan->heads) + " does not match " +
                                            site_name(prune_plan->site) + " with " +
                                            std::to_string(layers_at(prune_plan->site)) + " layers of " +
                                            std::to_string(heads) + " heads");
        }
    }
};

// ---------------------------------------------------------------------------
// Parameters

struct LayerNormParams {
    Var gain;
    Var bias;
};

struct FeedForwardParams {
    Var s;  // [d_model x d_ff]
    Var b;  // [d_ff]
    Var z;  // [d_ff x d_model]
    Var r;  // [d_model]
};

struct EncoderLayerParams {
    LayerNormParams attn_norm;
    MhaParams mha;
    LayerNormParams ff_norm;
    FeedForwardParams ff;
};

struct DecoderLayerParams {
    LayerNormParams self_norm;
    MhaParams self_mha;
    LayerNormParams inter_norm;
    MhaParams inter_mha;
    LayerNormParams ff_norm;
    FeedForwardParams ff;
};

// pointwise -> GLU -> depthwise -> layer norm -> swish -> pointwise
struct ConvModuleParams {
    Var pw1_w;  // [d_model x 2 d_model]
    Var pw1_b;
    Var dw_kernel;  // [kernel x d_model]
    LayerNormParams norm;
    Var pw2_w;  // [d_model x d_model]
    Var pw2_b;
};

struct ConformerBlockParams {
    LayerNormParams ff1_norm;
    FeedForwardParams ff1;
    MhaParams mha;
    ConvModuleParams conv;
    LayerNormParams ff2_norm;
    FeedForwardParams ff2;
    LayerNormParams final_norm;
};

struct FrontendParams {
    Var conv1_w;  // [(3 input_dim) x d_model]
    Var conv1_b;
    Var conv2_w;  // [(3 d_model) x d_model]
    Var conv2_b;
};

struct ModelParams {
    FrontendParams frontend;
    std::vector<EncoderLayerParams> encoder;    // transformer encoder
    std::vector<ConformerBlockParams> conformer;  // conformer encoder
    LayerNormParams encoder_norm;               // after a transformer encoder stack
    Var embedding;                              // [vocab x d_model]
    std::vector<DecoderLayerParams> decoder;
    LayerNormParams decoder_norm;
    Var out_w;  // [d_model x vocab]
    Var out_b;
    Var ctc_w;  // [d_model x vocab]
    Var ctc_b;
};

namespace detail {

inline LayerNormParams init_norm(std::size_t d) {
    return {parameter(Tensor(Shape{d}, 1.0)), parameter(Tensor::zeros({d}))};
}

inline FeedForwardParams init_ff(std::size_t d, std::size_t dff, Rng& rng) {
    return {parameter(xavier_uniform({d, dff}, d, dff, rng)), parameter(Tensor::zeros({dff})),
            parameter(xavier_uniform({dff, d}, dff, d, rng)), parameter(Tensor::zeros({d}))};
}

}  // namespace detail

inline ModelParams init_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.d_model, v = cfg.vocab_size;
    ModelParams p;
    p.frontend = {parameter(xavier_uniform({3 * cfg.input_dim, d}, 3 * cfg.input_dim, d, rng)),
                  parameter(Tensor::zeros({d})), parameter(xavier_uniform({3 * d, d}, 3 * d, d, rng)),
                  parameter(Tensor::zeros({d}))};
    for (std::size_t l = 0; l < cfg.enc_layers; ++l) {
        if (cfg.block_kind == BlockKind::transformer) {
            EncoderLayerParams e;
            e.attn_norm = detail::init_norm(d);
            e.mha = init_mha(d, cfg.heads, cfg.d_k, cfg.d_v, rng);
            e.ff_norm = detail::init_norm(d);
            e.ff = detail::init_ff(d, cfg.d_ff, rng);
            p.encoder.push_back(std::move(e));
        } else {
            ConformerBlockParams c;
            c.ff1_norm = detail::init_norm(d);
            c.ff1 = detail::init_ff(d, cfg.d_ff, rng);
            c.mha = init_mha(d, cfg.heads, cfg.d_k, cfg.d_v, rng);
            c.conv.pw1_w = parameter(xavier_uniform({d, 2 * d}, d, 2 * d, rng));
            c.conv.pw1_b = parameter(Tensor::zeros({2 * d}));
            c.conv.dw_kernel = parameter(xavier_uniform({cfg.conv_kernel, d}, cfg.conv_kernel, cfg.conv_kernel, rng));
            c.conv.norm = detail::init_norm(d);
            c.conv.pw2_w = parameter(xavier_uniform({d, d}, d, d, rng));
            c.conv.pw2_b = parameter(Tensor::zeros({d}));
            c.ff2_norm = detail::init_norm(d);
            c.ff2 = detail::init_ff(d, cfg.d_ff, rng);
            c.final_norm = detail::init_norm(d);
            p.conformer.push_back(std::move(c));
        }
    }
    if (cfg.block_kind == BlockKind::transformer) p.encoder_norm = detail::init_norm(d);
    p.embedding = parameter(normal_tensor({v, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
        DecoderLayerParams dl;
        dl.self_norm = detail::init_norm(d);
        dl.self_mha = init_mha(d, cfg.heads, cfg.d_k, cfg.d_v, rng);
        dl.inter_norm = detail::init_norm(d);
        dl.inter_mha = init_mha(d, cfg.heads, cfg.d_k, cfg.d_v, rng);
        dl.ff_norm = detail::init_norm(d);
        dl.ff = detail::init_ff(d, cfg.d_ff, rng);
        p.decoder.push_back(std::move(dl));
    }
    p.decoder_norm = detail::init_norm(d);
    p.out_w = parameter(xavier_uniform({d, v}, d, v, rng));
    p.out_b = parameter(Tensor::zeros({v}));
    p.ctc_w = parameter(xavier_uniform({d, v}, d, v, rng));
    p.ctc_b = parameter(Tensor::zeros({v}));
    return p;
}

using NamedParams = std::vector<std::pair<std::string, Var>>;

namespace detail {

inline void add_norm(NamedParams& out, const std::string& prefix, const LayerNormParams& n) {
    out.emplace_back(prefix + ".gain", n.gain);
    out.emplace_back(prefix + ".bias", n.bias);
}

inline void add_ff(NamedParams& out, const std::string& prefix, const FeedForwardParams& f) {
    out.emplace_back(prefix + ".s", f.s);
    out.emplace_back(prefix + ".b", f.b);
    out.emplace_back(prefix + ".z", f.z);
    out.emplace_back(prefix + ".r", f.r);
}

inline void add_mha(NamedParams& out, const std::string& prefix, const MhaParams& m) {
    for (std::size_t h = 0; h < m.heads.size(); ++h) {
        const std::string hp = prefix + ".head" + std::to_string(h);
        out.emplace_back(hp + ".w_q", m.heads[h].w_q);
        out.emplace_back(hp + ".w_k", m.heads[h].w_k);
        out.emplace_back(hp + ".w_v", m.heads[h].w_v);
    }
    out.emplace_back(prefix + ".u_h", m.u_h);
}

}  // namespace detail

// Stable, fully qualified names for every trainable tensor. The handles share
// storage with params.
inline NamedParams named_parameters(const ModelParams& p) {
    NamedParams out;
    out.emplace_back("frontend.conv1.w", p.frontend.conv1_w);
    out.emplace_back("frontend.conv1.b", p.frontend.conv1_b);
    out.emplace_back("frontend.conv2.w", p.frontend.conv2_w);
    out.emplace_back("frontend.conv2.b", p.frontend.conv2_b);
    for (std::size_t l = 0; l < p.encoder.size(); ++l) {
        const std::string pre = "encoder." + std::to_string(l);
        const auto& e = p.encoder[l];
        detail::add_norm(out, pre + ".attn_norm", e.attn_norm);
        detail::add_mha(out, pre + ".mha", e.mha);
        detail::add_norm(out, pre + ".ff_norm", e.ff_norm);
        detail::add_ff(out, pre + ".ff", e.ff);
    }
    for (std::size_t l = 0; l < p.conformer.size(); ++l) {
        const std::string pre = "conformer." + std::to_string(l);
        const auto& c = p.conformer[l];
        detail::add_norm(out, pre + ".ff1_norm", c.ff1_norm);
        detail::add_ff(out, pre + ".ff1", c.ff1);
        detail::add_mha(out, pre + ".mha", c.mha);
        out.emplace_back(pre + ".conv.pw1_w", c.conv.pw1_w);
        out.emplace_back(pre + ".conv.pw1_b", c.conv.pw1_b);
        out.emplace_back(pre + ".conv.dw_kernel", c.conv.dw_kernel);
        detail::add_norm(out, pre + ".conv.norm", c.conv.norm);
        out.emplace_back(pre + ".conv.pw2_w", c.conv.pw2_w);
        out.emplace_back(pre + ".conv.pw2_b", c.conv.pw2_b);
        detail::add_norm(out, pre + ".ff2_norm", c.ff2_norm);
        detail::add_ff(out, pre + ".ff2", c.ff2);
        detail::add_norm(out, pre + ".final_norm", c.final_norm);
    }
    if (p.encoder_norm.gain.defined()) detail::add_norm(out, "encoder_norm", p.encoder_norm);
    out.emplace_back("embedding", p.embedding);
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
        const std::string pre = "decoder." + std::to_string(l);
        const auto& dl = p.decoder[l];
        detail::add_norm(out, pre + ".self_norm", dl.self_norm);
        detail::add_mha(out, pre + ".self_mha", dl.self_mha);
        detail::add_norm(out, pre + ".inter_norm", dl.inter_norm);
        detail::add_mha(out, pre + ".inter_mha", dl.inter_mha);
        detail::add_norm(out, pre + ".ff_norm", dl.ff_norm);
        detail::add_ff(out, pre + ".ff", dl.ff);
    }
    detail::add_norm(out, "decoder_norm", p.decoder_norm);
    out.emplace_back("out.w", p.out_w);
    out.emplace_back("out.b", p.out_b);
    out.emplace_back("ctc.w", p.ctc_w);
    out.emplace_back("ctc.b", p.ctc_b);
    return out;
}

inline std::size_t parameter_count(const ModelParams& p) {
    std::size_t n = 0;
    for (const auto& [name, v] : named_parameters(p)) n += v.value().size();
    return n;
}

// Attention heads of one site, in layer order.
inline std::vector<const MhaParams*> site_mhas(const ModelParams& p, Site site) {
    std::vector<const MhaParams*> out;
    if (site == Site::encoder_self) {
        for (const auto& e : p.encoder) out.push_back(&e.mha);
        for (const auto& c : p.conformer) out.push_back(&c.mha);
    } else {
        for (const auto& dl : p.decoder) out.push_back(site == Site::decoder_self ? &dl.self_mha : &dl.inter_mha);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Structural head removal

// keep[layer][head] per site; all true without a plan.
struct StructuralMask {
    std::vector<std::vector<bool>> encoder_self;
    std::vector<std::vector<bool>> decoder_self;
    std::vector<std::vector<bool>> decoder_inter;

    const std::vector<std::vector<bool>>& at(Site s) const {
        return s == Site::encoder_self ? encoder_self : s == Site::decoder_self ? decoder_self : decoder_inter;
    }
    std::vector<std::vector<bool>>& at(Site s) {
        return s == Site::encoder_self ? encoder_self : s == Site::decoder_self ? decoder_self : decoder_inter;
    }

    std::size_t remaining(Site s) const {
        std::size_t n = 0;
        for (const auto& layer : at(s))
            for (bool k : layer) n += k;
        return n;
    }
};

inline StructuralMask full_structure(const ModelConfig& cfg) {
    StructuralMask m;
    m.encoder_self.assign(cfg.enc_layers, std::vector<bool>(cfg.heads, true));
    m.decoder_self.assign(cfg.dec_layers, std::vector<bool>(cfg.heads, true));
    m.decoder_inter.assign(cfg.dec_layers, std::vector<bool>(cfg.heads, true));
    return m;
}

// Turns a plan into the structural mask the forward pass consumes. Removed
// heads stay removed in every mode; a layer that loses all heads keeps its
// feed-forward sublayer.
inline StructuralMask apply_prune_plan(const ModelConfig& cfg, const PrunePlan& plan) {
    if (plan.layers != cfg.layers_at(plan.site) || plan.heads != cfg.heads)
        throw std::invalid_argument("apply_prune_plan: plan grid " + std::to_string(plan.layers) + "x" +
                                    std::to_string(plan.heads) + " does not match " + site_name(plan.site) + " (" +
                                    std::to_string(cfg.layers_at(plan.site)) + "x" + std::to_string(cfg.heads) + ")");
    StructuralMask m = full_structure(cfg);
    for (std::size_t l = 0; l < plan.layers; ++l) m.at(plan.site)[l] = plan.layer_keep(l);
    return m;
}

inline StructuralMask structure_of(const ModelConfig& cfg) {
    return cfg.prune_plan ? apply_prune_plan(cfg, *cfg.prune_plan) : full_structure(cfg);
}

// ---------------------------------------------------------------------------
// Building blocks

// Stochastic pieces of one forward pass.
struct LayerRun {
    Mode mode = Mode::eval;
    double dropout_rate = 0.0;
    Rng* rng = nullptr;                               // needed for training-mode dropout
    std::vector<AttentionRecord>* records = nullptr;  // attention captured when set

    Var drop(const Var& x) const {
        if (mode != Mode::train || dropout_rate <= 0.0) return x;
        if (!rng) throw std::invalid_argument("dropout in training mode needs an rng");
        return dropout(x, dropout_rate, true, *rng);
    }
};

enum class Activation { relu, swish };

// act(x S + b) Z + r
inline Var feed_forward(const FeedForwardParams& p, const Var& x, Activation act = Activation::relu) {
    Var hidden = add_bias(matmul(x, p.s), p.b);
    hidden = act == Activation::relu ? relu(hidden) : swish(hidden);
    return add_bias(matmul(hidden, p.z), p.r);
}

namespace detail {

inline Var run_mha(const MhaParams& mha, const Var& q, const Var& kv, const AttentionMasks& masks,
                   const std::vector<double>& gates, const LayerRun& run, Site site, std::size_t layer) {
    MhaResult r = mha_forward(mha, q, kv, kv, masks, gates, run.records != nullptr, site, layer);
    if (run.records) run.records->push_back(std::move(*r.record));
    return r.out;
}

}  // namespace detail

// The feed-forward sublayer of a Transformer layer, FFN(LayerNorm(x)).
inline Var transformer_ff_sublayer(const FeedForwardParams& ff, const LayerNormParams& norm, const Var& x) {
    return feed_forward(ff, layer_norm(x, norm.gain, norm.bias));
}

// X' = X + MHA(LN(X)); Y = X' + FFN(LN(X')).
inline Var encoder_layer_forward(const EncoderLayerParams& p, const Var& x, const AttentionMasks& masks,
                                 const std::vector<double>& gates, const LayerRun& run = {}, std::size_t layer = 0) {
    const Var normed = layer_norm(x, p.attn_norm.gain, p.attn_norm.bias);
    const Var attended = detail::run_mha(p.mha, normed, normed, masks, gates, run, Site::encoder_self, layer);
    const Var x1 = add(x, run.drop(attended));
    return add(x1, run.drop(transformer_ff_sublayer(p.ff, p.ff_norm, x1)));
}

inline Var encoder_layer_forward(const EncoderLayerParams& p, const Var& x, const RemovalPolicy& policy, Rng& rng,
                                 std::vector<AttentionRecord>* records = nullptr) {
    const RemovalMask mask = sample_removal_mask(policy, 1, p.mha.num_heads(), rng);
    LayerRun run{policy.mode, 0.0, &rng, records};
    return encoder_layer_forward(p, x, {}, head_gates(policy, mask.row(0)), run);
}

// Causal self-attention, then attention over the encoder output, then FFN,
// each as a pre-norm residual sublayer.
inline Var decoder_layer_forward(const DecoderLayerParams& p, const Var& y, const Var& enc_out,
                                 const AttentionMasks& inter_masks, const std::vector<double>& self_gates,
                                 const std::vector<double>& inter_gates, const LayerRun& run = {},
                                 std::size_t layer = 0) {
    AttentionMasks self_masks;
    self_masks.causal = true;
    const Var n1 = layer_norm(y, p.self_norm.gain, p.self_norm.bias);
    const Var y1 =
        add(y, run.drop(detail::run_mha(p.self_mha, n1, n1, self_masks, self_gates, run, Site::decoder_self, layer)));
    const Var n2 = layer_norm(y1, p.inter_norm.gain, p.inter_norm.bias);
    const Var y2 = add(
        y1, run.drop(detail::run_mha(p.inter_mha, n2, enc_out, inter_masks, inter_gates, run, Site::decoder_inter, layer)));
    return add(y2, run.drop(transformer_ff_sublayer(p.ff, p.ff_norm, y2)));
}

inline Var decoder_layer_forward(const DecoderLayerParams& p, const Var& y, const Var& enc_out,
                                 const RemovalPolicy& policy, Rng& rng,
                                 std::vector<AttentionRecord>* records = nullptr) {
    const RemovalMask self_mask = sample_removal_mask(policy, 1, p.self_mha.num_heads(), rng);
    const RemovalMask inter_mask = sample_removal_mask(policy, 1, p.inter_mha.num_heads(), rng);
    LayerRun run{policy.mode, 0.0, &rng, records};
    return decoder_layer_forward(p, y, enc_out, {}, head_gates(policy, self_mask.row(0)),
                                 head_gates(policy, inter_mask.row(0)), run);
}

// Conformer feed-forward module: swish(LN(x) S + b) Z + r.
inline Var conformer_ff(const FeedForwardParams& ff, const LayerNormParams& norm, const Var& x) {
    return feed_forward(ff, layer_norm(x, norm.gain, norm.bias), Activation::swish);
}

// Padded rows are zeroed before the depthwise convolution so they act like
// the convolution's own zero padding.
inline Var conformer_conv(const ConvModuleParams& p, const Var& x, const std::optional<std::vector<bool>>& padding) {
    Var h = glu(pointwise_conv1d(x, p.pw1_w, p.pw1_b));
    if (padding && detail::any_set(*padding)) {
        std::vector<bool> rows(h.value().size(), false);
        const std::size_t d = h.cols();
        for (std::size_t t = 0; t < padding->size(); ++t)
            if ((*padding)[t])
                for (std::size_t j = 0; j < d; ++j) rows[t * d + j] = true;
        h = masked_fill(h, rows, 0.0);
    }
    h = depthwise_conv1d(h, p.dw_kernel);
    h = swish(layer_norm(h, p.norm.gain, p.norm.bias));
    return pointwise_conv1d(h, p.pw2_w, p.pw2_b);
}

// X~ = X + FF(X)/2; X' = X~ + MHA(X~); X'' = X' + Conv(X'); Y = LN(X'' + FF(X'')/2).
inline Var conformer_block_forward(const ConformerBlockParams& p, const Var& x, const AttentionMasks& masks,
                                   const std::vector<double>& gates, const LayerRun& run = {}, std::size_t layer = 0) {
    const Var xt = add(x, scale(run.drop(conformer_ff(p.ff1, p.ff1_norm, x)), 0.5));
    const Var x1 = add(xt, run.drop(detail::run_mha(p.mha, xt, xt, masks, gates, run, Site::encoder_self, layer)));
    const Var x2 = add(x1, run.drop(conformer_conv(p.conv, x1, masks.key_padding)));
    const Var x3 = add(x2, scale(run.drop(conformer_ff(p.ff2, p.ff2_norm, x2)), 0.5));
    return layer_norm(x3, p.final_norm.gain, p.final_norm.bias);
}

inline Var conformer_block_forward(const ConformerBlockParams& p, const Var& x, const RemovalPolicy& policy,
                                   Rng& rng, std::vector<AttentionRecord>* records = nullptr) {
    const RemovalMask mask = sample_removal_mask(policy, 1, p.mha.num_heads(), rng);
    LayerRun run{policy.mode, 0.0, &rng, records};
    return conformer_block_forward(p, x, {}, head_gates(policy, mask.row(0)), run);
}

// pe[pos][2i] = sin(pos / 10000^(2i/d)), pe[pos][2i+1] = cos(same angle).
inline Tensor sinusoidal_positions(std::size_t n, std::size_t d_model) {
    if (d_model % 2 != 0)
        throw std::invalid_argument("sinusoidal_positions: d_model must be even, got " + std::to_string(d_model));
    Tensor pe(Shape{n, d_model});
    for (std::size_t pos = 0; pos < n; ++pos)
        for (std::size_t i = 0; i < d_model / 2; ++i) {
            const double angle = static_cast<double>(pos) /
                                 std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
            pe.at(pos, 2 * i) = std::sin(angle);
            pe.at(pos, 2 * i + 1) = std::cos(angle);
        }
    return pe;
}

// x * sqrt(d_model) + positional encoding.
inline Var add_positions(const Var& x) {
    const double s = std::sqrt(static_cast<double>(x.cols()));
    return add(scale(x, s), constant(sinusoidal_positions(x.rows(), x.cols())));
}

inline constexpr std::size_t kFrontendKernel = 3;
inline constexpr std::size_t kFrontendStride = 2;
inline constexpr std::size_t kMinFrontendFrames = 7;

// Length after both valid stride-2, kernel-3 convolutions: (len - 3) / 2 + 1 twice.
inline std::size_t frontend_length(std::size_t frames) {
    if (frames < kMinFrontendFrames)
        throw std::invalid_argument("conv_frontend: need at least " + std::to_string(kMinFrontendFrames) +
                                    " frames, got " + std::to_string(frames));
    const std::size_t first = (frames - kFrontendKernel) / kFrontendStride + 1;
    return (first - kFrontendKernel) / kFrontendStride + 1;
}

inline Var conv_frontend(const FrontendParams& p, const Var& x) {
    frontend_length(x.shape()[0]);
    Var h = relu(strided_conv1d(x, p.conv1_w, p.conv1_b, kFrontendKernel, kFrontendStride));
    return relu(strided_conv1d(h, p.conv2_w, p.conv2_b, kFrontendKernel, kFrontendStride));
}

// ---------------------------------------------------------------------------
// Full model

// Removal gates of one example for every MHA instance, indexed [layer][head].
struct ExampleGates {
    std::vector<std::vector<double>> encoder_self;
    std::vector<std::vector<double>> decoder_self;
    std::vector<std::vector<double>> decoder_inter;
};

// Removal masks of one training step, each [batch x heads].
struct StepMasks {
    std::vector<RemovalMask> encoder_self;
    std::vector<RemovalMask> decoder_self;
    std::vector<RemovalMask> decoder_inter;
};

// Draw order: encoder layers bottom-up, then each decoder layer's self- and
// inter-attention in turn.
inline StepMasks sample_step_masks(const ModelConfig& cfg, std::size_t batch, Mode mode, Rng& rng) {
    StepMasks m;
    for (std::size_t l = 0; l < cfg.enc_layers; ++l)
        m.encoder_self.push_back(sample_removal_mask({cfg.site_q(Site::encoder_self), mode}, batch, cfg.heads, rng));
    for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
        m.decoder_self.push_back(sample_removal_mask({cfg.site_q(Site::decoder_self), mode}, batch, cfg.heads, rng));
        m.decoder_inter.push_back(
            sample_removal_mask({cfg.site_q(Site::decoder_inter), mode}, batch, cfg.heads, rng));
    }
    return m;
}

inline ExampleGates example_gates(const ModelConfig& cfg, const StepMasks& masks, std::size_t b, Mode mode,
                                  const StructuralMask& structure) {
    ExampleGates g;
    auto fill = [&](Site site, const std::vector<RemovalMask>& site_masks, std::vector<std::vector<double>>& out) {
        const RemovalPolicy policy{cfg.site_q(site), mode};
        for (std::size_t l = 0; l < site_masks.size(); ++l)
            out.push_back(head_gates(policy, site_masks[l].row(b), &structure.at(site)[l]));
    };
    fill(Site::encoder_self, masks.encoder_self, g.encoder_self);
    fill(Site::decoder_self, masks.decoder_self, g.decoder_self);
    fill(Site::decoder_inter, masks.decoder_inter, g.decoder_inter);
    return g;
}

inline ExampleGates eval_gates(const ModelConfig& cfg, const StructuralMask& structure) {
    Rng unused;
    return example_gates(cfg, sample_step_masks(cfg, 1, Mode::eval, unused), 0, Mode::eval, structure);
}

struct EncoderOutput {
    Var states;               // [T' x d_model], padded rows included
    std::size_t valid = 0;    // unpadded length
    AttentionMasks key_mask;  // padding of states
};

// src is [frames x input_dim]; only the first valid_frames rows are real.
inline EncoderOutput encode(const ModelConfig& cfg, const ModelParams& p, const Var& src, std::size_t valid_frames,
                            const ExampleGates& gates, const LayerRun& run) {
    if (src.shape().size() != 2 || src.cols() != cfg.input_dim)
        throw std::invalid_argument("encode: expected [frames x " + std::to_string(cfg.input_dim) + "] input, got " +
                                    to_string(src.shape()));
    EncoderOutput out;
    out.valid = frontend_length(valid_frames);
    Var x = run.drop(add_positions(conv_frontend(p.frontend, src)));
    const std::size_t len = x.rows();
    if (out.valid < len) {
        std::vector<bool> pad(len, false);
        for (std::size_t t = out.valid; t < len; ++t) pad[t] = true;
        out.key_mask.key_padding = std::move(pad);
    }
    if (cfg.block_kind == BlockKind::transformer) {
        for (std::size_t l = 0; l < p.encoder.size(); ++l)
            x = encoder_layer_forward(p.encoder[l], x, out.key_mask, gates.encoder_self[l], run, l);
        x = layer_norm(x, p.encoder_norm.gain, p.encoder_norm.bias);
    } else {
        for (std::size_t l = 0; l < p.conformer.size(); ++l)
            x = conformer_block_forward(p.conformer[l], x, out.key_mask, gates.encoder_self[l], run, l);
    }
    out.states = x;
    return out;
}

// Decoder logits [len(inputs) x vocab] for decoder input ids (kSos first).
inline Var decode(const ModelConfig& cfg, const ModelParams& p, const std::vector<int>& inputs,
                  const EncoderOutput& enc, const ExampleGates& gates, const LayerRun& run) {
    std::vector<int> ids(inputs);
    for (int& id : ids) {
        if (id == kPad) id = kBlank;
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
            throw std::invalid_argument("decode: token " + std::to_string(id) + " outside vocabulary of " +
                                        std::to_string(cfg.vocab_size));
    }
    Var y = run.drop(add_positions(embedding(p.embedding, ids)));
    for (std::size_t l = 0; l < p.decoder.size(); ++l)
        y = decoder_layer_forward(p.decoder[l], y, enc.states, enc.key_mask, gates.decoder_self[l],
                                  gates.decoder_inter[l], run, l);
    y = layer_norm(y, p.decoder_norm.gain, p.decoder_norm.bias);
    return add_bias(matmul(y, p.out_w), p.out_b);
}

struct ModelOutput {
    Var dec_logits;  // [t x vocab], row i predicts target i (tokens then kEos)
    Var ctc_logits;  // [T' x vocab], padded rows included
    std::size_t enc_valid = 0;
    std::vector<AttentionRecord> records;
};

// Teacher-forced decoder input: kSos followed by the tokens (kPad entries kept).
inline std::vector<int> decoder_inputs(const std::vector<int>& tokens) {
    std::vector<int> in{kSos};
    in.insert(in.end(), tokens.begin(), tokens.end());
    return in;
}

// Decoder targets: tokens followed by kEos, placed before any padding.
inline std::vector<int> decoder_targets(const std::vector<int>& tokens) {
    std::vector<int> out;
    bool placed = false;
    for (int t : tokens) {
        if (t == kPad && !placed) {
            out.push_back(kEos);
            placed = true;
        }
        out.push_back(t);
    }
    if (!placed) out.push_back(kEos);
    return out;
}

inline void check_tokens(const ModelConfig& cfg, const std::vector<int>& tokens) {
    for (int t : tokens) {
        if (t == kPad) continue;
        if (t < kFirstToken || static_cast<std::size_t>(t) >= cfg.vocab_size)
            throw std::invalid_argument("model_forward: token " + std::to_string(t) + " outside data range [" +
                                        std::to_string(kFirstToken) + ", " + std::to_string(cfg.vocab_size) + ")");
    }
}

// One example; src rows beyond valid_frames and kPad tokens are padding.
// With capture set, every attention matrix lands in ModelOutput::records.
inline ModelOutput model_forward(const ModelConfig& cfg, const ModelParams& p, const Var& src,
                                 std::size_t valid_frames, const std::vector<int>& tokens, const ExampleGates& gates,
                                 LayerRun run, bool capture = false) {
    check_tokens(cfg, tokens);
    ModelOutput out;
    run.records = capture ? &out.records : nullptr;
    const EncoderOutput enc = encode(cfg, p, src, valid_frames, gates, run);
    out.dec_logits = decode(cfg, p, decoder_inputs(tokens), enc, gates, run);
    out.ctc_logits = add_bias(matmul(enc.states, p.ctc_w), p.ctc_b);
    out.enc_valid = enc.valid;
    return out;
}

// Unpadded single example with masks sampled from the configured policy.
inline ModelOutput model_forward(const ModelConfig& cfg, const ModelParams& p, const Tensor& src,
                                 const std::vector<int>& tokens, Mode mode, Rng& rng, bool capture = false) {
    const StepMasks masks = sample_step_masks(cfg, 1, mode, rng);
    const ExampleGates gates = example_gates(cfg, masks, 0, mode, structure_of(cfg));
    LayerRun run{mode, mode == Mode::train ? cfg.dropout_rate : 0.0, &rng, nullptr};
    return model_forward(cfg, p, constant(src), src.shape[0], tokens, gates, run, capture);
}

// Greedy autoregressive decoding in evaluation mode.
inline std::vector<int> greedy_decode(const ModelConfig& cfg, const ModelParams& p, const Tensor& src,
                                      std::size_t valid_frames, std::size_t max_len) {
    NoGradGuard no_grad;
    const StructuralMask structure = structure_of(cfg);
    const ExampleGates gates = eval_gates(cfg, structure);
    const LayerRun run{};
    const EncoderOutput enc = encode(cfg, p, constant(src), valid_frames, gates, run);
    std::vector<int> hyp;
    std::vector<int> inputs{kSos};
    while (hyp.size() < max_len) {
        const Var logits = decode(cfg, p, inputs, enc, gates, run);
        const std::size_t last = logits.rows() - 1, v = logits.cols();
        std::size_t best = 0;
        for (std::size_t j = 1; j < v; ++j)
            if (logits.value().at(last, j) > logits.value().at(last, best)) best = j;
        const int token = static_cast<int>(best);
        if (token == kEos) break;
        hyp.push_back(token);
        inputs.push_back(token);
    }
    return hyp;
}

}  // namespace sahr
