#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mole/errors.hpp"
#include "mole/graph.hpp"
#include "mole/io.hpp"
#include "mole/pipeline.hpp"
#include "mole/util.hpp"

namespace {

struct Overrides {
    std::string out;
    std::optional<unsigned> jobs;
    std::optional<double> timeout;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> folds;
    std::optional<std::size_t> rounds;
    std::string negatives;

    void add(CLI::App* cmd) {
        cmd->add_option("--out", out, "Output directory (overrides the config)");
        cmd->add_option("--jobs", jobs, "Rounds processed concurrently")->check(CLI::PositiveNumber);
        cmd->add_option("--timeout", timeout, "Per-stage budget in seconds; slower stages are reported as OOT")
            ->check(CLI::NonNegativeNumber);
        cmd->add_option("--seed", seed, "Master seed");
        cmd->add_option("--folds", folds, "Number of folds");
        cmd->add_option("--rounds", rounds, "Rounds to run (default: one per fold)");
        cmd->add_option("--negatives", negatives, "Negative sampling: uniform or degree_matched");
    }

    void apply(mole::ExperimentConfig& c) const {
        if (!out.empty()) c.output = out;
        if (jobs) c.jobs = *jobs;
        if (timeout) c.timeout = *timeout;
        if (seed) c.seed = *seed;
        if (folds) c.folds = *folds;
        if (rounds) c.rounds = *rounds;
        if (!negatives.empty()) c.negatives = mole::negative_strategy_from_string(negatives);
        c.validate();
    }
};

mole::SubsetSpec subset_flag(const std::string& value) {
    if (value == "all" || value == "singletons" || value == "none") return {value, {}};
    // Explicit sets: "CN,JC;AA" -> {{CN, JC}, {AA}}.
    mole::SubsetSpec spec{"explicit", {}};
    for (auto group : mole::split_char(value, ';')) {
        std::vector<std::string> names;
        for (auto name : mole::split_char(group, ','))
            if (!name.empty()) names.emplace_back(name);
        spec.explicit_sets.push_back(std::move(names));
    }
    return spec;
}

void print_summary(const std::vector<mole::ModelSummary>& summary) {
    std::printf("%-14s %8s %8s %8s %8s %8s\n", "model", "mrr", "std", "hits1", "hits5", "hits10");
    for (const auto& s : summary) {
        if (s.folds == s.out_of_time) {
            std::printf("%-14s %8s\n", s.model.c_str(), "OOT");
            continue;
        }
        std::printf("%-14s %8.4f %8.4f %8.4f %8.4f %8.4f\n", s.model.c_str(), s.mrr_mean, s.mrr_std, s.hits_mean[0],
                    s.hits_mean[1], s.hits_mean[2]);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heuristic-informed mixture-of-experts link prediction on multilayer networks"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "Write a Watts-Strogatz multiplex as an edge list");
    mole::WsParams ws;
    std::string gen_out;
    gen->add_option("--entities", ws.entities, "Number of entities")->required();
    gen->add_option("--layers", ws.layers, "Number of layers")->required();
    gen->add_option("--k", ws.ring_degree, "Ring degree (even)")->required();
    gen->add_option("--p", ws.rewire_probability, "Rewiring probability")->required();
    gen->add_option("--seed", ws.seed, "Seed")->required();
    gen->add_option("--out", gen_out, "Output .mlel path")->required();

    auto* stats = app.add_subcommand("stats", "Per-layer statistics as CSV");
    std::string stats_in, stats_out;
    bool stats_directed = false;
    stats->add_option("--input", stats_in, "Edge list")->required();
    stats->add_option("--out", stats_out, "CSV path (default: stdout)");
    stats->add_flag("--directed", stats_directed, "Treat edges as directed unless the file says otherwise");

    auto* exp = app.add_subcommand("experiment", "Run the full cross-validated pipeline");
    std::string exp_config;
    Overrides exp_over;
    exp->add_option("--config", exp_config, "Experiment config (JSON)")->required();
    exp_over.add(exp);

    auto* abl = app.add_subcommand("ablate", "Retrain the gater over heuristic/expert subsets and alpha/K sweeps");
    std::string abl_config, abl_heuristics, abl_experts;
    std::vector<double> abl_alphas;
    std::vector<std::size_t> abl_ks;
    Overrides abl_over;
    abl->add_option("--config", abl_config, "Experiment config (JSON)")->required();
    abl->add_option("--heuristic-subsets", abl_heuristics, "all | singletons | none | explicit sets 'CN,JC;AA'");
    abl->add_option("--experts-subsets", abl_experts, "all | singletons | none | explicit sets");
    abl->add_option("--alphas", abl_alphas, "Alpha values to sweep")->delimiter(',');
    abl->add_option("--ks", abl_ks, "Top-K values to sweep")->delimiter(',');
    abl_over.add(abl);

    auto* rep = app.add_subcommand("report", "Gating-weight and unique-correct tables from a finished run");
    std::string rep_run;
    std::size_t rep_quantiles = 4;
    rep->add_option("--run", rep_run, "Run directory")->required();
    rep->add_option("--quantiles", rep_quantiles, "Quantile bins per heuristic")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    std::string failure_dir;
    try {
        if (*gen) {
            auto g = mole::generate_ws_multiplex(ws);
            mole::write_file(gen_out, mole::write_edgelist(g));
            std::printf("wrote %zu edges over %zu layers to %s\n", g.total_edge_count(), g.layer_count(),
                        gen_out.c_str());
        } else if (*stats) {
            mole::EdgeListOptions opt;
            opt.directed = stats_directed;
            opt.min_layers = 1;
            auto parsed = mole::read_edgelist(stats_in, opt);
            std::string csv = "layer,nodes,edges,average_degree,clustering,density\n";
            for (const auto& s : mole::layer_stats(parsed.graph))
                csv += std::to_string(s.layer_id) + "," + std::to_string(s.node_count) + "," +
                       std::to_string(s.edge_count) + "," + mole::format_double(s.average_degree) + "," +
                       mole::format_double(s.clustering) + "," + mole::format_double(s.density) + "\n";
            if (stats_out.empty())
                std::cout << csv;
            else
                mole::write_file(stats_out, csv);
            if (parsed.self_loops_dropped || parsed.duplicates_dropped)
                std::fprintf(stderr, "dropped %zu self-loops and %zu duplicate edges\n", parsed.self_loops_dropped,
                             parsed.duplicates_dropped);
        } else if (*exp) {
            auto config = mole::load_config(exp_config);
            exp_over.apply(config);
            failure_dir = config.output;
            auto result = mole::run_experiment(config);
            print_summary(result.summary);
        } else if (*abl) {
            auto config = mole::load_config(abl_config);
            if (!abl_heuristics.empty()) config.ablation.heuristic_subsets = subset_flag(abl_heuristics);
            if (!abl_experts.empty()) config.ablation.expert_subsets = subset_flag(abl_experts);
            if (!abl_alphas.empty()) config.ablation.alphas = abl_alphas;
            if (!abl_ks.empty()) config.ablation.ks = abl_ks;
            abl_over.apply(config);
            failure_dir = config.output;
            auto rows = mole::run_ablation(config);
            std::printf("%zu gater trainings written to %s/ablation\n", rows.size(), config.output.c_str());
        } else if (*rep) {
            failure_dir = rep_run;
            mole::run_report(rep_run, rep_quantiles);
            std::printf("report tables written to %s/report\n", rep_run.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        if (!failure_dir.empty()) mole::mark_failed(failure_dir, e.what());
        return 1;
    }
    return 0;
}
