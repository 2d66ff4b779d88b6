#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sahr/analysis.hpp"
#include "sahr/checkpoint.hpp"
#include "sahr/model.hpp"
#include "sahr/objectives.hpp"
#include "sahr/tasks.hpp"

namespace sahr {

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t step = 0;
};

inline AdamState init_adam(const NamedParams& params) {
    AdamState s;
    for (const auto& entry : params) {
        s.m.push_back(Tensor::zeros(entry.second.shape()));
        s.v.push_back(Tensor::zeros(entry.second.shape()));
    }
    return s;
}

struct NonFiniteGradient : std::runtime_error {
    std::string parameter;
    explicit NonFiniteGradient(const std::string& name)
        : std::runtime_error("non-finite gradient in parameter " + name), parameter(name) {}
};

// One bias-corrected Adam update from the gradients accumulated on params.
// A parameter that received no gradient is treated as having gradient zero.
// Non-finite gradients reject the whole step before anything changes.
inline void adam_step(const NamedParams& params, AdamState& state, double lr, const AdamConfig& cfg = {}) {
    if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
    for (const auto& [name, var] : params) {
        const Tensor& g = var.node().grad;
        if (g.empty()) continue;
        if (g.shape != var.shape())
            throw std::invalid_argument("adam_step: gradient shape " + to_string(g.shape) + " for " + name + " " +
                                        to_string(var.shape()));
        if (!g.all_finite()) throw NonFiniteGradient(name);
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Node& node = params[i].second.node();
        if (node.grad.empty()) continue;
        auto& w = node.value.data;
        const auto& g = node.grad.data;
        auto& m = state.m[i].data;
        auto& v = state.v[i].data;
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
        }
    }
}

inline void zero_grads(const NamedParams& params) {
    for (const auto& entry : params) entry.second.node().grad = Tensor{};
}

// Inverse square root schedule with linear warmup.
inline double warmup_lr(std::uint64_t step, std::size_t d_model, std::size_t warmup_steps, double scale) {
    if (step == 0) throw std::invalid_argument("warmup_lr: steps count from 1");
    if (warmup_steps == 0) throw std::invalid_argument("warmup_lr: warmup_steps must be positive");
    const double s = static_cast<double>(step), w = static_cast<double>(warmup_steps);
    return scale / std::sqrt(static_cast<double>(d_model)) * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

// ---------------------------------------------------------------------------
// Losses over batches

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    std::size_t max_steps = 0;  // 0 means no limit
    std::size_t warmup_steps = 400;
    double lr_scale = 1.0;
    double label_smoothing = 0.1;
    std::size_t average_last = 10;
    double stop_accuracy = 0.0;  // stop once dev accuracy reaches this; 0 disables
    std::size_t eval_every = 0;  // extra dev evaluations every this many steps; 0 means epoch ends only
    std::uint64_t seed = 1;
    AdamConfig adam;

    void validate() const {
        if (batch_size == 0) throw std::invalid_argument("train.batch_size must be positive");
        if (warmup_steps == 0) throw std::invalid_argument("train.warmup_steps must be positive");
        if (!(lr_scale > 0.0)) throw std::invalid_argument("train.lr_scale must be positive");
        if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
            throw std::invalid_argument("train.label_smoothing must lie in [0, 1)");
        if (average_last == 0) throw std::invalid_argument("train.average_last must be positive");
        if (!(stop_accuracy >= 0.0 && stop_accuracy <= 1.0))
            throw std::invalid_argument("train.stop_accuracy must lie in [0, 1]");
        if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0))
            throw std::invalid_argument("train.adam: betas must lie in [0, 1) and eps must be positive");
    }
};

struct BatchLoss {
    Var total;  // mean over examples of the joint loss
    double decoder_loss = 0.0;
    double ctc_loss = 0.0;
    double token_accuracy = 0.0;  // teacher-forced, over all counted target positions
};

// Joint loss of one example whose source rows past valid_frames are padding.
inline LossReport example_loss(const ModelConfig& cfg, const ModelParams& p, const Tensor& frames,
                               std::size_t valid_frames, const std::vector<int>& tokens, const ExampleGates& gates,
                               const LayerRun& run, double smoothing) {
    const ModelOutput out = model_forward(cfg, p, constant(frames), valid_frames, tokens, gates, run);
    std::vector<int> labels;
    for (int t : tokens)
        if (t != kPad) labels.push_back(t);
    const Var ctc_lp = log_softmax_rows(slice_rows(out.ctc_logits, 0, out.enc_valid));
    return joint_loss(out.dec_logits, ctc_lp, decoder_targets(tokens), labels, cfg.lambda_ctc, smoothing);
}

// Draw order for training: removal masks for the whole batch, then dropout
// example by example.
inline BatchLoss batch_loss(const ModelConfig& cfg, const ModelParams& p, const Batch& batch, Mode mode, Rng& rng,
                            double smoothing) {
    const StructuralMask structure = structure_of(cfg);
    const StepMasks masks = sample_step_masks(cfg, batch.size(), mode, rng);
    const LayerRun run{mode, mode == Mode::train ? cfg.dropout_rate : 0.0, &rng, nullptr};
    std::vector<Var> losses;
    BatchLoss out;
    double hits = 0.0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const ExampleGates gates = example_gates(cfg, masks, b, mode, structure);
        const LossReport r = example_loss(cfg, p, batch.frames[b], batch.src_lengths[b], batch.targets[b], gates,
                                          run, smoothing);
        losses.push_back(r.total);
        out.decoder_loss += r.decoder_loss;
        out.ctc_loss += r.ctc_loss;
        hits += r.token_accuracy * static_cast<double>(r.tokens);
        tokens += r.tokens;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.total = scale(sum_scalars(losses), inv);
    out.decoder_loss *= inv;
    out.ctc_loss *= inv;
    out.token_accuracy = tokens ? hits / static_cast<double>(tokens) : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
    std::size_t examples = 0;
    double loss = 0.0;  // mean joint loss, eval mode
    double decoder_loss = 0.0;
    double ctc_loss = 0.0;
    double accuracy = 0.0;  // greedy decoding, position-wise
    double wer = 0.0;
    std::optional<SimilarityReport> similarity;  // encoder self-attention
    std::vector<std::vector<int>> hypotheses;
};

// Evaluation mode throughout: every non-pruned head active and unscaled, no
// dropout. With capture set, encoder self-attention of every example is
// appended to records (whole model when all_sites is set).
inline EvalReport evaluate(const ModelConfig& cfg, const ModelParams& p, const std::vector<Example>& examples,
                           double smoothing, bool with_similarity = false,
                           std::vector<AttentionRecord>* records = nullptr, bool all_sites = false) {
    if (examples.empty()) throw std::invalid_argument("evaluate: no examples");
    NoGradGuard no_grad;
    const ExampleGates gates = eval_gates(cfg, structure_of(cfg));
    EvalReport rep;
    rep.examples = examples.size();
    std::vector<std::vector<int>> refs;
    std::vector<AttentionRecord> encoder_records;
    for (const Example& ex : examples) {
        const bool capture = with_similarity || records;
        const ModelOutput out =
            model_forward(cfg, p, constant(ex.frames), ex.frames.shape[0], ex.target, gates, LayerRun{}, capture);
        std::vector<int> labels(ex.target);
        const Var ctc_lp = log_softmax_rows(slice_rows(out.ctc_logits, 0, out.enc_valid));
        const LossReport r = joint_loss(out.dec_logits, ctc_lp, decoder_targets(ex.target), labels, cfg.lambda_ctc,
                                        smoothing);
        rep.loss += r.total_value();
        rep.decoder_loss += r.decoder_loss;
        rep.ctc_loss += r.ctc_loss;
        for (const auto& rec : out.records) {
            if (rec.site == Site::encoder_self) encoder_records.push_back(rec);
            if (records && (all_sites || rec.site == Site::encoder_self)) records->push_back(rec);
        }
        rep.hypotheses.push_back(greedy_decode(cfg, p, ex.frames, ex.frames.shape[0], out.enc_valid + 1));
        refs.push_back(ex.target);
    }
    const double n = static_cast<double>(examples.size());
    rep.loss /= n;
    rep.decoder_loss /= n;
    rep.ctc_loss /= n;
    const ScoreReport s = score(rep.hypotheses, refs);
    rep.accuracy = s.accuracy;
    rep.wer = s.wer;
    if (with_similarity && cfg.heads >= 2 && !encoder_records.empty()) rep.similarity = head_similarity(encoder_records);
    return rep;
}

// ---------------------------------------------------------------------------
// Metrics log: one record per line, space-separated key=value pairs. Reals are
// written in shortest round-trip form so logs compare byte for byte.

inline std::string format_real(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline void log_train_record(std::ostream& os, std::uint64_t step, std::size_t epoch, double loss, double dec,
                             double ctc, double acc, double lr) {
    os << "step=" << step << " epoch=" << epoch << " split=train loss=" << format_real(loss)
       << " dec_loss=" << format_real(dec) << " ctc_loss=" << format_real(ctc) << " acc=" << format_real(acc)
       << " lr=" << format_real(lr) << '\n';
}

inline void log_eval_record(std::ostream& os, std::uint64_t step, std::size_t epoch, const std::string& split,
                            const EvalReport& r) {
    os << "step=" << step << " epoch=" << epoch << " split=" << split << " loss=" << format_real(r.loss)
       << " dec_loss=" << format_real(r.decoder_loss) << " ctc_loss=" << format_real(r.ctc_loss)
       << " acc=" << format_real(r.accuracy) << " wer=" << format_real(r.wer);
    if (r.similarity) os << " similarity=" << format_real(r.similarity->mean);
    os << '\n';
}

// ---------------------------------------------------------------------------
// Training loop

// Independent generator streams derived from the run seed.
inline Rng init_rng(std::uint64_t seed) { return detail::stream(seed, 0x1000); }
inline Rng train_rng(std::uint64_t seed) { return detail::stream(seed, 0x2000); }


struct TrainResult {
    Snapshot final_params;
    Snapshot averaged;  // mean of the checkpoint ring
    std::deque<Snapshot> ring;
    AdamState adam;
    std::uint64_t steps = 0;
    std::size_t epochs_run = 0;
    std::optional<EvalReport> last_dev;      // final epoch, live parameters
    std::optional<EvalReport> averaged_dev;  // averaged parameters
    bool stopped_early = false;
    bool diverged = false;
    std::string divergence;
};

struct TrainHooks {
    std::function<void(std::size_t epoch, const Snapshot&)> on_epoch;  // end-of-epoch checkpoint
    bool dev_similarity = false;
};

// Trains p in place on ds.train. One rng stream derived from tc.seed drives the
// data order, head removal and dropout. Each epoch logs one train record
// (means over its steps) and one dev record. On divergence the parameters are
// rolled back to the last end-of-epoch snapshot.
inline TrainResult train_loop(const ModelConfig& cfg, const ModelParams& p, const Dataset& ds, const TrainConfig& tc,
                              std::ostream& log, const TrainHooks& hooks = {}) {
    cfg.validate();
    tc.validate();
    const NamedParams named = named_parameters(p);
    TrainResult res;
    res.adam = init_adam(named);
    Rng rng = train_rng(tc.seed);
    Snapshot last_good = snapshot_of(p);
    const bool have_dev = !ds.dev.empty();
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        if (tc.max_steps && res.steps >= tc.max_steps) break;
        const std::vector<Batch> batches = make_batches(ds.train, tc.batch_size, &rng);
        double loss = 0.0, dec = 0.0, ctc = 0.0, acc = 0.0, lr = 0.0;
        std::size_t n = 0;
        for (const Batch& batch : batches) {
            if (tc.max_steps && res.steps >= tc.max_steps) break;
            auto abort = [&](const char* why) {
                res.diverged = true;
                res.divergence = "step " + std::to_string(res.steps + 1) + ": " + why;
                zero_grads(named);
                load_snapshot(p, last_good);
                log << "step=" << res.steps << " epoch=" << epoch << " split=abort reason=diverged\n";
                res.final_params = last_good;
            };
            BatchLoss bl;
            double value = 0.0;
            try {
                bl = batch_loss(cfg, p, batch, Mode::train, rng, tc.label_smoothing);
                value = bl.total.value()[0];
                if (!std::isfinite(value)) throw std::runtime_error("non-finite loss " + format_real(value));
                backward(bl.total);
                lr = warmup_lr(res.steps + 1, cfg.d_model, tc.warmup_steps, tc.lr_scale);
                adam_step(named, res.adam, lr, tc.adam);
            } catch (const NonFiniteValue& e) {
                abort(e.what());
                return res;
            } catch (const std::runtime_error& e) {
                abort(e.what());
                return res;
            }
            zero_grads(named);
            ++res.steps;
            loss += value;
            dec += bl.decoder_loss;
            ctc += bl.ctc_loss;
            acc += bl.token_accuracy;
            ++n;
            const bool epoch_ends = n == batches.size() || (tc.max_steps && res.steps >= tc.max_steps);
            if (have_dev && tc.eval_every && res.steps % tc.eval_every == 0 && !epoch_ends) {
                res.last_dev = evaluate(cfg, p, ds.dev, tc.label_smoothing, hooks.dev_similarity);
                log_eval_record(log, res.steps, epoch, "dev", *res.last_dev);
                if (tc.stop_accuracy > 0.0 && res.last_dev->accuracy >= tc.stop_accuracy) {
                    res.stopped_early = true;
                    break;
                }
            }
        }
        if (n == 0) break;
        res.epochs_run = epoch;
        const double inv = 1.0 / static_cast<double>(n);
        log_train_record(log, res.steps, epoch, loss * inv, dec * inv, ctc * inv, acc * inv, lr);
        last_good = snapshot_of(p);
        res.ring.push_back(last_good);
        if (res.ring.size() > tc.average_last) res.ring.pop_front();
        if (hooks.on_epoch) hooks.on_epoch(epoch, last_good);
        if (res.stopped_early) break;
        if (have_dev) {
            res.last_dev = evaluate(cfg, p, ds.dev, tc.label_smoothing, hooks.dev_similarity);
            log_eval_record(log, res.steps, epoch, "dev", *res.last_dev);
            if (tc.stop_accuracy > 0.0 && res.last_dev->accuracy >= tc.stop_accuracy) {
                res.stopped_early = true;
                break;
            }
        }
    }
    res.final_params = snapshot_of(p);
    if (!res.ring.empty()) {
        res.averaged = average_checkpoints({res.ring.begin(), res.ring.end()});
        if (have_dev) {
            load_snapshot(p, res.averaged);
            res.averaged_dev = evaluate(cfg, p, ds.dev, tc.label_smoothing, hooks.dev_similarity);
            log_eval_record(log, res.steps, res.epochs_run, "dev-averaged", *res.averaged_dev);
            load_snapshot(p, res.final_params);
        }
    } else {
        res.averaged = res.final_params;
    }
    return res;
}

}  // namespace sahr
