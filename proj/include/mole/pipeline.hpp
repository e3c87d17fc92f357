#pragma once

#include <cstdint>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mole/evaluation.hpp"
#include "mole/experts.hpp"
#include "mole/gating.hpp"
#include "mole/graph.hpp"
#include "mole/heuristics.hpp"
#include "mole/io.hpp"

namespace mole {

/// One registry entry: a built-in expert kind plus its settings.
struct ExpertSpec {
    std::string kind;  // heuristic | embedding | feature_mlp
    std::string name;
    nlohmann::json settings = nlohmann::json::object();
};

std::vector<ExpertSpec> default_experts();

/// Subset selector: "all" (every non-empty subset), "singletons" (each
/// member alone plus the full set), "none", or an explicit list of lists.
struct SubsetSpec {
    std::string mode = "none";
    std::vector<std::vector<std::string>> explicit_sets;
};

struct AblationSpec {
    SubsetSpec heuristic_subsets;
    SubsetSpec expert_subsets;
    std::vector<double> alphas;
    std::vector<std::size_t> ks;
};

struct DatasetSpec {
    std::string path;
    std::optional<WsParams> generator;
    bool directed = false;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    std::vector<HeuristicId> heuristics{std::begin(kAllHeuristics), std::end(kAllHeuristics)};
    double alpha = 0.5;
    HeuristicOptions heuristic_options;
    std::vector<ExpertSpec> experts = default_experts();
    GaterConfig gater;
    EnsWConfig ens_w;
    std::size_t folds = 10;
    /// Rounds to run (0 runs one per fold).
    std::size_t rounds = 0;
    std::uint64_t seed = 1;
    NegativeStrategy negatives = NegativeStrategy::Uniform;
    std::string output = "mole_run";
    AblationSpec ablation;
    unsigned jobs = 1;
    /// Per-stage budget in seconds (0 disables).
    double timeout = 0.0;

    /// Missing keys keep their defaults; unknown keys are rejected.
    /// Relative dataset paths resolve against `base_dir`.
    static ExperimentConfig from_json(const nlohmann::json& j, const std::string& base_dir = "");
    nlohmann::json to_json() const;
    void validate() const;

    std::size_t round_count() const { return rounds == 0 ? folds : rounds; }
    /// Hash of every setting the per-round features and expert scores depend on.
    std::string precompute_hash() const;
};

ExperimentConfig load_config(const std::string& path);

MultilayerGraph load_dataset(const ExperimentConfig& config);

/// Seeds of every stochastic stage, all derived from the master seed.
struct RoundSeeds {
    std::uint64_t negatives;
    std::vector<std::uint64_t> experts;
    std::uint64_t gater;
    std::uint64_t ens_w;
};
std::uint64_t split_seed(const ExperimentConfig& config);
RoundSeeds round_seeds(const ExperimentConfig& config, std::size_t round);

/// Everything later stages need from one round: the split, per-layer
/// features of all four heuristics and the raw expert scores.
struct RoundData {
    std::size_t round = 0;
    RoundSplit split;
    RoundCache cache;
    bool from_cache = false;
    bool out_of_time = false;
    std::vector<double> stage_seconds;  // features, experts
    std::vector<bool> expert_out_of_time;

    std::vector<std::size_t> rows(SplitRole role) const;
};

struct RunPaths {
    std::string output;
    std::string cache;

    static RunPaths for_config(const ExperimentConfig& config);
    std::string round_cache(const MultilayerGraph& g, const ExperimentConfig& config, std::size_t round) const;
    std::string expert_dir(std::size_t round) const;
};

/// Loads the round from cache, or computes it: features on the observation
/// graph (training positives leave their own pair out), then experts (loaded
/// from the run directory when present, trained and written otherwise).
RoundData prepare_round(const MultilayerGraph& g, const ExperimentConfig& config, const FoldAssignment& folds,
                        std::size_t round, const RunPaths& paths, unsigned threads);

struct GaterVariant {
    std::vector<HeuristicId> heuristics;
    std::vector<std::size_t> experts;  // columns of the score matrix
    double alpha = 0.5;
    Routing routing;
};

struct GaterRun {
    GaterModel model;
    std::vector<double> test_logits;
    Matrix test_weights;
    MetricReport metrics;
    double seconds = 0.0;
    bool out_of_time = false;
};

GaterRun run_gater(const RoundData& data, const ExperimentConfig& config, const GaterVariant& variant);

struct ExperimentResult {
    std::vector<ResultRow> rows;
    std::vector<ModelSummary> summary;
};

/// Full pipeline; writes results.csv, summary.json, per-round artifacts and
/// manifest.json under the output directory.
ExperimentResult run_experiment(const ExperimentConfig& config);

struct AblationRow {
    std::string group;    // heuristics | experts | alpha | k
    std::string variant;
    std::size_t fold = 0;
    bool out_of_time = false;
    MetricRow metrics;
};

/// Gater retrainings over the configured subsets and sweeps, reusing the
/// round caches; writes ablation/results.csv and ablation/summary.csv.
std::vector<AblationRow> run_ablation(const ExperimentConfig& config);

/// Gating-weight and unique-correct tables from a finished run directory.
void run_report(const std::string& run_dir, std::size_t quantiles = 4);

/// Writes manifest.json listing every other file under `dir`.
void write_manifest(const std::string& dir, const nlohmann::json& header);

/// Leaves `<dir>/failed/error.txt` describing why a command stopped.
void mark_failed(const std::string& dir, const std::string& what);

}  // namespace mole
