// sahr_cli: train, evaluate, analyze and sweep stochastic head removal runs.

#include <iostream>

#include "CLI11.hpp"
#include "sahr/commands.hpp"

int main(int argc, char** argv) {
    using namespace sahr;
    CLI::App app{"Stochastic attention head removal lab"};
    app.require_subcommand(1);

    TrainArgs train;
    std::string train_config;
    auto* t = app.add_subcommand("train", "train one run into its output directory");
    t->add_option("--config", train_config, "config file (key = value lines)")->check(CLI::ExistingFile);
    t->add_option("--set", train.overrides, "override key=value, applied in order")->take_all();
    t->add_option("--out", train.out, "output directory (default $SAHR_OUTPUT_ROOT/<name> or runs/<name>)");
    t->add_flag("--overwrite", train.overwrite, "replace a non-empty output directory");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "evaluate a checkpoint with every head active");
    e->add_option("--run", eval.run_dir, "run directory holding config.snapshot")->required()->check(CLI::ExistingDirectory);
    e->add_option("--checkpoint", eval.checkpoint, "checkpoint file (default <run>/ckpt/averaged)");
    e->add_option("--split", eval.split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
    e->add_option("--limit", eval.limit, "evaluate the first N examples only");
    e->add_flag("--dump-attention", eval.dump_attention, "write attention matrices to <run>/dumps");
    e->add_flag("--all-sites", eval.all_sites, "dump decoder self and inter attention too");

    auto* a = app.add_subcommand("analyze", "offline analysis of dumps and transcripts");
    a->require_subcommand(1);

    HeatmapArgs heat;
    auto* ah = a->add_subcommand("heatmap", "mean diagonality per layer and head");
    ah->add_option("--dump", heat.dumps, "attention dump files")->required()->take_all();
    ah->add_option("--site", heat.site, "encoder-self or decoder-self");
    ah->add_option("--out", heat.out, "output prefix; writes .csv and .matrix")->required();

    SimilarityArgs sim;
    auto* as = a->add_subcommand("similarity", "mean pairwise cosine similarity between heads");
    as->add_option("--dump", sim.dumps, "attention dump files")->required()->take_all();
    as->add_option("--site", sim.site, "attention site");
    as->add_option("--out", sim.out, "output CSV")->required();

    PlanArgs plan;
    auto* ap = a->add_subcommand("plan", "write a prune plan");
    ap->add_option("--heatmap", plan.heatmap, "heatmap CSV")->check(CLI::ExistingFile);
    ap->add_option("--tau", plan.tau, "remove heads with diagonality above tau");
    ap->add_flag("--topmost", plan.topmost, "remove every head of the last layer");
    ap->add_option("--layers", plan.layers, "layer count for --topmost without a heatmap");
    ap->add_option("--heads", plan.heads, "head count for --topmost without a heatmap");
    ap->add_option("--site", plan.site, "site for --topmost without a heatmap");
    ap->add_option("--out", plan.out, "plan file")->required();

    WerArgs wer;
    auto* aw = a->add_subcommand("wer", "corpus word error rate");
    aw->add_option("--ref", wer.ref, "reference transcripts")->required()->check(CLI::ExistingFile);
    aw->add_option("--hyp", wer.hyp, "hypothesis transcripts")->required()->check(CLI::ExistingFile);
    aw->add_option("--out", wer.out, "report file");

    MapssweArgs mp;
    auto* am = a->add_subcommand("mapsswe", "matched-pair segment word error test");
    am->add_option("--ref", mp.ref, "reference transcripts")->required()->check(CLI::ExistingFile);
    am->add_option("--hyp-a", mp.hyp_a, "system A transcripts")->required()->check(CLI::ExistingFile);
    am->add_option("--hyp-b", mp.hyp_b, "system B transcripts")->required()->check(CLI::ExistingFile);
    am->add_option("--permutations", mp.permutation_draws, "random sign flips for a permutation p-value");
    am->add_option("--out", mp.out, "report file");

    SweepArgs sweep;
    std::string sweep_config;
    auto* s = app.add_subcommand("sweep", "one run per (q, seed) plus summary.csv");
    s->add_option("--config", sweep_config, "config file")->check(CLI::ExistingFile);
    s->add_option("--set", sweep.overrides, "override key=value shared by every run")->take_all();
    s->add_option("--q", sweep.qs, "removal probabilities")->delimiter(',')->check(CLI::Range(0.0, 1.0));
    s->add_option("--seeds", sweep.seeds, "run seeds")->delimiter(',');
    s->add_option("--out", sweep.out, "sweep root directory")->required();
    s->add_flag("--overwrite", sweep.overwrite, "replace existing run directories");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    if (*t) {
        if (!train_config.empty()) train.config_path = train_config;
        return cmd_train(train);
    }
    if (*e) return cmd_eval(eval);
    if (*s) {
        if (!sweep_config.empty()) sweep.config_path = sweep_config;
        return cmd_sweep(sweep);
    }
    if (*ah) return guarded([&] { return analyze_heatmap(heat, std::cout); }, std::cerr);
    if (*as) return guarded([&] { return analyze_similarity(sim, std::cout); }, std::cerr);
    if (*ap) return guarded([&] { return analyze_plan(plan, std::cout); }, std::cerr);
    if (*aw) return guarded([&] { return analyze_wer(wer, std::cout); }, std::cerr);
    if (*am) return guarded([&] { return analyze_mapsswe(mp, std::cout); }, std::cerr);
    return kExitUsage;
}
