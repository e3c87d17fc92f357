#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mole/evaluation.hpp"
#include "mole/experts.hpp"
#include "mole/gating.hpp"
#include "mole/graph.hpp"
#include "mole/heuristics.hpp"
#include "mole/triples.hpp"

namespace mole {

// -------------------------------------------------------------------- csv

/// Quotes a field when it holds a comma, quote or newline.
std::string csv_field(std::string_view s);
std::string csv_line(std::span<const std::string> fields);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const;
};

CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::string& path);

double parse_double_field(std::string_view s);
long long parse_int_field(std::string_view s);

// -------------------------------------------------------------- artifacts

/// `u,v,layer,label,fold,role` with entity names and file layer ids.
std::string split_manifest_csv(const MultilayerGraph& g, const RoundSplit& split);

/// `u,v,layer,label,f1..fk` rows of aggregated features.
std::string features_csv(const MultilayerGraph& g, std::span<const LabeledTriple> triples, const Matrix& features);
nlohmann::json features_sidecar(std::span<const HeuristicId> heuristics, double alpha, const HeuristicOptions& options,
                                const FeatureScaler& scaler);

/// `u,v,layer,label,<expert>...` raw expert scores.
std::string score_matrix_csv(const MultilayerGraph& g, const ExpertScoreMatrix& scores);
nlohmann::json score_matrix_sidecar(const ExpertScoreMatrix& scores);

/// Writes `<dir>/<name>.json` (header) and `<dir>/<name>.params.csv`.
void write_expert(const std::string& dir, const Expert& expert);
ExpertPtr read_expert(const std::string& header_path);

nlohmann::json gater_to_json(const GaterModel& model);
GaterModel gater_from_json(const nlohmann::json& j);

nlohmann::json routing_to_json(const Routing& routing);
Routing routing_from_json(const nlohmann::json& j);

/// `epoch,train_loss,val_loss`.
std::string history_csv(const TrainingHistory& history);

/// `model,fold,layer,mrr,hits1,hits5,hits10`; out-of-time rows carry `OOT`.
std::string results_csv(std::span<const ResultRow> rows);
nlohmann::json summary_json(std::span<const ModelSummary> summaries);

/// Table A: `expert,mean,std`.
std::string gating_summary_csv(std::span<const std::string> experts, const GatingReport& report);
/// Table B: `heuristic,quantile,count,share,low,high,<expert>...`.
std::string gating_quantiles_csv(std::span<const std::string> experts, const GatingReport& report);
/// `expert,correct,unique,fraction_of_own_correct,fraction_of_all`.
std::string unique_correct_csv(std::span<const std::string> experts, const UniqueCorrect& uc);

// ------------------------------------------------------------------ cache

/// Per-layer feature rows and raw expert scores of one round, keyed by
/// dense ids so they reload without the name tables.
struct RoundCache {
    FeatureLayout layout;
    std::vector<std::string> experts;
    std::vector<SplitRole> roles;
    TripleList triples;
    Matrix features;  // layout.width() columns
    Matrix scores;    // experts.size() columns
};

std::string round_cache_csv(const RoundCache& cache);
RoundCache parse_round_cache(std::string_view text);

}  // namespace mole
