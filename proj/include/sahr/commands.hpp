#pragma once

// The train / eval / analyze / sweep commands behind tools/sahr_cli.cpp.
//
// Run directory layout:
//   config.snapshot   every config key with its final value
//   metrics.log       key=value records, one per line
//   ckpt/epoch-N      end-of-epoch parameters
//   ckpt/averaged     mean of the last train.average_last epoch checkpoints
//   dumps/            attention dumps written by eval
//   reports/          eval summaries, transcripts, analysis output

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sahr/analysis.hpp"
#include "sahr/checkpoint.hpp"
#include "sahr/config.hpp"
#include "sahr/tasks.hpp"
#include "sahr/training.hpp"

namespace sahr {

namespace fs = std::filesystem;

// Errors the user can fix by changing arguments or inputs (exit code 2).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

inline std::ifstream open_in(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("cannot open " + path.string());
    return is;
}

inline std::string eval_line(const std::string& split, const EvalReport& r) {
    std::ostringstream os;
    os << "split=" << split << " examples=" << r.examples << " loss=" << format_real(r.loss)
       << " dec_loss=" << format_real(r.decoder_loss) << " ctc_loss=" << format_real(r.ctc_loss)
       << " acc=" << format_real(r.accuracy) << " wer=" << format_real(r.wer);
    if (r.similarity) os << " similarity=" << format_real(r.similarity->mean);
    return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::optional<std::string> config_path;
    std::vector<std::string> overrides;  // key=value, applied in order after the file
    std::optional<std::string> out;
    bool overwrite = false;
};

inline RunConfig resolve_config(const std::optional<std::string>& path, const std::vector<std::string>& overrides) {
    RunConfig cfg = path ? load_config(*path) : RunConfig{};
    for (const auto& o : overrides) apply_override(cfg, o);
    return cfg;
}

struct TrainOutcome {
    fs::path dir;
    TrainResult result;
};

// Trains cfg into its output directory. Throws UsageError before any compute
// when the config is invalid or the directory is taken.
inline TrainOutcome run_training(const RunConfig& cfg, const std::vector<std::string>& overrides, bool overwrite) {
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("invalid config: ") + e.what());
    }
    const fs::path dir = cfg.resolved_output_dir();
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!overwrite) throw UsageError("output directory " + dir.string() + " is not empty; pass --overwrite");
        fs::remove_all(dir);
    }
    fs::create_directories(dir / "ckpt");
    fs::create_directories(dir / "dumps");
    fs::create_directories(dir / "reports");
    {
        auto os = detail::open_out(dir / "config.snapshot");
        write_config(os, cfg, overrides);
    }
    const ModelConfig mc = cfg.model_config();
    const TrainConfig tc = cfg.train_config();
    const Dataset ds = generate(cfg.task);
    Rng init = init_rng(cfg.seed);
    const ModelParams params = init_model(mc, init);
    auto log = detail::open_out(dir / "metrics.log");
    TrainHooks hooks;
    hooks.dev_similarity = mc.heads >= 2;
    hooks.on_epoch = [&](std::size_t epoch, const Snapshot& snap) {
        save_checkpoint((dir / "ckpt" / ("epoch-" + std::to_string(epoch))).string(), snap);
    };
    TrainOutcome out{dir, train_loop(mc, params, ds, tc, log, hooks)};
    log.flush();
    if (!out.result.diverged) save_checkpoint((dir / "ckpt" / "averaged").string(), out.result.averaged);
    return out;
}

inline int cmd_train(const TrainArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    try {
        RunConfig cfg = resolve_config(args.config_path, args.overrides);
        std::vector<std::string> overrides = args.overrides;
        if (args.out) {
            cfg.output_dir = *args.out;
            overrides.push_back("output_dir=" + *args.out);
        }
        const TrainOutcome o = run_training(cfg, overrides, args.overwrite);
        if (o.result.diverged) {
            err << "training diverged at " << o.result.divergence << "; epoch checkpoints kept in "
                << (o.dir / "ckpt").string() << '\n';
            return kExitFailure;
        }
        out << "run=" << o.dir.string() << " steps=" << o.result.steps << " epochs=" << o.result.epochs_run;
        if (o.result.averaged_dev) out << ' ' << detail::eval_line("dev-averaged", *o.result.averaged_dev);
        out << '\n';
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const UsageError& e) {
        err << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "train failed: " << e.what() << '\n';
        return kExitFailure;
    }
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string run_dir;                      // supplies config.snapshot and default paths
    std::optional<std::string> checkpoint;    // default <run>/ckpt/averaged
    std::string split = "dev";
    bool dump_attention = false;
    bool all_sites = false;                   // dump decoder attention too
    std::size_t limit = 0;                    // first N examples only; 0 means all
};

struct EvalOutcome {
    EvalReport report;
    std::vector<std::string> written;
};

inline EvalOutcome run_eval(const EvalArgs& args) {
    const fs::path dir = args.run_dir;
    RunConfig cfg;
    try {
        cfg = load_config((dir / "config.snapshot").string());
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("run config: ") + e.what());
    }
    const ModelConfig mc = cfg.model_config();
    Rng init = init_rng(cfg.seed);
    const ModelParams params = init_model(mc, init);
    const std::string ckpt = args.checkpoint ? *args.checkpoint : (dir / "ckpt" / "averaged").string();
    try {
        load_snapshot(params, load_checkpoint(ckpt));
    } catch (const CheckpointMismatch& e) {
        throw UsageError(ckpt + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw UsageError(e.what());
    } catch (const std::invalid_argument& e) {
        throw UsageError(ckpt + ": " + e.what());
    }
    const Dataset ds = generate(cfg.task);
    std::vector<Example> examples;
    try {
        examples = ds.split(args.split);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (args.limit && args.limit < examples.size()) examples.resize(args.limit);
    if (examples.empty()) throw UsageError("split " + args.split + " is empty");

    EvalOutcome out;
    std::vector<AttentionRecord> records;
    out.report = evaluate(mc, params, examples, cfg.train.label_smoothing, mc.heads >= 2,
                          args.dump_attention ? &records : nullptr, args.all_sites);
    const std::string stem = fs::path(ckpt).filename().string() + "-" + args.split;
    {
        const fs::path path = dir / "reports" / ("eval-" + stem + ".txt");
        auto os = detail::open_out(path);
        os << "checkpoint=" << ckpt << ' ' << detail::eval_line(args.split, out.report) << '\n';
        out.written.push_back(path.string());
    }
    std::vector<std::vector<int>> refs;
    for (const auto& ex : examples) refs.push_back(ex.target);
    for (const auto& [name, rows] : {std::pair{"hyp", &out.report.hypotheses}, std::pair{"ref", &refs}}) {
        const fs::path path = dir / "reports" / (std::string(name) + "-" + stem + ".txt");
        auto os = detail::open_out(path);
        write_transcripts(os, *rows);
        out.written.push_back(path.string());
    }
    if (args.dump_attention) {
        const fs::path path = dir / "dumps" / (stem + ".attn");
        auto os = detail::open_out(path);
        for (const auto& r : records) write_attention_dump(os, r);
        out.written.push_back(path.string());
    }
    return out;
}

inline int cmd_eval(const EvalArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    try {
        const EvalOutcome o = run_eval(args);
        out << detail::eval_line(args.split, o.report) << '\n';
        for (const auto& w : o.written) out << "wrote " << w << '\n';
        return kExitOk;
    } catch (const UsageError& e) {
        err << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "eval failed: " << e.what() << '\n';
        return kExitFailure;
    }
}

// ---------------------------------------------------------------------------
// analyze

inline std::vector<AttentionRecord> load_dump(const std::string& path) {
    auto is = detail::open_in(path);
    try {
        return read_attention_dump(is);
    } catch (const DumpFormatError& e) {
        throw UsageError(path + ": " + e.what());
    }
}

inline std::vector<AttentionRecord> select_site(const std::vector<AttentionRecord>& records, Site site) {
    std::vector<AttentionRecord> out;
    for (const auto& r : records)
        if (r.site == site) out.push_back(r);
    if (out.empty()) throw UsageError(std::string("no records for site ") + site_name(site));
    return out;
}

struct HeatmapArgs {
    std::vector<std::string> dumps;
    std::string site = "encoder-self";
    std::string out;  // writes <out>.csv and <out>.matrix
};

inline int analyze_heatmap(const HeatmapArgs& a, std::ostream& out) {
    std::vector<AttentionRecord> all;
    for (const auto& d : a.dumps) {
        auto r = load_dump(d);
        all.insert(all.end(), r.begin(), r.end());
    }
    const Heatmap hm = build_heatmap(select_site(all, parse_site(a.site)));
    {
        auto os = detail::open_out(a.out + ".csv");
        write_heatmap_csv(os, hm);
    }
    {
        auto os = detail::open_out(a.out + ".matrix");
        write_heatmap_matrix(os, hm);
    }
    out << "heatmap layers=" << hm.layers << " heads=" << hm.heads << " utterances=" << hm.utterances << '\n';
    return kExitOk;
}

struct SimilarityArgs {
    std::vector<std::string> dumps;
    std::string site = "encoder-self";
    std::string out;
};

inline int analyze_similarity(const SimilarityArgs& a, std::ostream& out) {
    std::vector<AttentionRecord> all;
    for (const auto& d : a.dumps) {
        auto r = load_dump(d);
        all.insert(all.end(), r.begin(), r.end());
    }
    SimilarityReport rep;
    try {
        rep = head_similarity(select_site(all, parse_site(a.site)));
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    auto os = detail::open_out(a.out);
    write_similarity_csv(os, rep);
    out << "similarity mean=" << format_real(rep.mean) << " skipped_rows=" << rep.skipped_rows << '\n';
    return kExitOk;
}

struct PlanArgs {
    std::optional<std::string> heatmap;  // threshold plan from a heatmap CSV
    std::optional<double> tau;
    bool topmost = false;                // or remove the last layer
    std::size_t layers = 0, heads = 0;   // grid for topmost
    std::string site = "encoder-self";
    std::string out;
};

inline int analyze_plan(const PlanArgs& a, std::ostream& out) {
    PrunePlan plan;
    if (a.topmost) {
        if (a.heatmap) {
            auto is = detail::open_in(*a.heatmap);
            const Heatmap hm = read_heatmap_csv(is);
            plan = plan_remove_topmost(hm.layers, hm.heads, hm.site);
        } else {
            if (!a.layers || !a.heads) throw UsageError("plan --topmost needs --heatmap or --layers and --heads");
            plan = plan_remove_topmost(a.layers, a.heads, parse_site(a.site));
        }
    } else {
        if (!a.heatmap || !a.tau) throw UsageError("plan needs --heatmap and --tau (or --topmost)");
        auto is = detail::open_in(*a.heatmap);
        Heatmap hm;
        try {
            hm = read_heatmap_csv(is);
        } catch (const std::invalid_argument& e) {
            throw UsageError(*a.heatmap + ": " + e.what());
        }
        if (!(*a.tau >= 0.0 && *a.tau <= 1.0)) throw UsageError("--tau must lie in [0, 1]");
        plan = plan_from_threshold(hm, *a.tau);
    }
    auto os = detail::open_out(a.out);
    write_prune_plan(os, plan);
    out << "plan total=" << plan.total() << " remaining=" << plan.remaining() << " removed=" << plan.removed()
        << '\n';
    return kExitOk;
}

inline std::vector<std::vector<std::string>> load_transcripts(const std::string& path) {
    auto is = detail::open_in(path);
    return read_transcripts(is);
}

struct WerArgs {
    std::string ref, hyp;
    std::optional<std::string> out;
};

inline int analyze_wer(const WerArgs& a, std::ostream& out) {
    CorpusWer c;
    try {
        c = corpus_wer(load_transcripts(a.ref), load_transcripts(a.hyp));
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    std::ostringstream line;
    line << "wer=" << format_real(c.total.wer) << " substitutions=" << c.total.substitutions
         << " deletions=" << c.total.deletions << " insertions=" << c.total.insertions
         << " ref_tokens=" << c.total.ref_length << " segments=" << c.per_segment.errors.size();
    if (c.total.empty_reference) line << " empty_reference=1";
    out << line.str() << '\n';
    if (a.out) {
        auto os = detail::open_out(*a.out);
        os << line.str() << '\n';
    }
    return kExitOk;
}

struct MapssweArgs {
    std::string ref, hyp_a, hyp_b;
    std::size_t permutation_draws = 0;  // nonzero adds a sign-flip permutation p-value
    std::optional<std::string> out;
};

inline int analyze_mapsswe(const MapssweArgs& a, std::ostream& out) {
    MapssweResult r;
    std::optional<double> perm;
    try {
        const auto ref = load_transcripts(a.ref);
        const CorpusWer wa = corpus_wer(ref, load_transcripts(a.hyp_a));
        const CorpusWer wb = corpus_wer(ref, load_transcripts(a.hyp_b));
        r = mapsswe(wa.per_segment, wb.per_segment);
        if (a.permutation_draws) perm = mapsswe_permutation_p(wa.per_segment, wb.per_segment, 1, a.permutation_draws);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    std::ostringstream line;
    line << "z=" << format_real(r.z) << " p=" << format_real(r.p) << " mean_difference=" << format_real(r.mean_difference)
         << " segments=" << r.segments;
    if (r.all_equal) line << " all_equal=1";
    if (perm) line << " permutation_p=" << format_real(*perm);
    out << line.str() << '\n';
    if (a.out) {
        auto os = detail::open_out(*a.out);
        os << line.str() << '\n';
    }
    return kExitOk;
}

template <typename F>
int guarded(F&& f, std::ostream& err) {
    try {
        return f();
    } catch (const UsageError& e) {
        err << e.what() << '\n';
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        err << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "failed: " << e.what() << '\n';
        return kExitFailure;
    }
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
    std::optional<std::string> config_path;
    std::vector<std::string> overrides;
    std::vector<double> qs{0.0};
    std::vector<std::uint64_t> seeds{1};
    std::string out;  // root; runs land in <out>/q<q>-seed<seed>
    bool overwrite = false;
};

inline std::string sweep_run_name(double q, std::uint64_t seed) {
    return "q" + format_real(q) + "-seed" + std::to_string(seed);
}

// One training run per (q, seed); a failed run is recorded in the summary and
// the sweep carries on.
inline int cmd_sweep(const SweepArgs& a, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    RunConfig base;
    try {
        base = resolve_config(a.config_path, a.overrides);
        if (a.qs.empty() || a.seeds.empty()) throw UsageError("sweep needs at least one q and one seed");
        if (a.out.empty()) throw UsageError("sweep needs --out");
    } catch (const std::exception& e) {
        err << e.what() << '\n';
        return kExitUsage;
    }
    fs::create_directories(a.out);
    std::ostringstream summary;
    summary << "q,seed,status,steps,dev_loss,accuracy,wer,similarity\n";
    bool all_ok = true;
    for (double q : a.qs)
        for (std::uint64_t seed : a.seeds) {
            RunConfig cfg = base;
            cfg.model.sahr_q = q;
            cfg.seed = seed;
            cfg.name = sweep_run_name(q, seed);
            cfg.output_dir = (fs::path(a.out) / cfg.name).string();
            std::vector<std::string> overrides = a.overrides;
            overrides.push_back("model.sahr_q=" + format_real(q));
            overrides.push_back("seed=" + std::to_string(seed));
            summary << format_real(q) << ',' << seed << ',';
            try {
                const TrainOutcome o = run_training(cfg, overrides, a.overwrite);
                if (o.result.diverged) {
                    summary << "diverged," << o.result.steps << ",,,,\n";
                    all_ok = false;
                    continue;
                }
                summary << "ok," << o.result.steps << ',';
                if (o.result.averaged_dev) {
                    const EvalReport& r = *o.result.averaged_dev;
                    summary << format_real(r.loss) << ',' << format_real(r.accuracy) << ',' << format_real(r.wer) << ','
                            << (r.similarity ? format_real(r.similarity->mean) : "");
                } else {
                    summary << ",,,";
                }
                summary << '\n';
                out << "finished " << cfg.name << '\n';
            } catch (const std::exception& e) {
                summary << "failed," << ",,,,\n";
                err << cfg.name << ": " << e.what() << '\n';
                all_ok = false;
            }
        }
    auto os = detail::open_out(fs::path(a.out) / "summary.csv");
    os << summary.str();
    out << "wrote " << (fs::path(a.out) / "summary.csv").string() << '\n';
    return all_ok ? kExitOk : kExitFailure;
}

}  // namespace sahr
