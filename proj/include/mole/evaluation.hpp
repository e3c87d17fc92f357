#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mole/gating.hpp"
#include "mole/graph.hpp"
#include "mole/heuristics.hpp"
#include "mole/matrix.hpp"
#include "mole/triples.hpp"

namespace mole {

// ----------------------------------------------------------------- splits

/// Linked entity pairs dealt into folds. A triple (u, v, l) belongs to a
/// fold iff its pair does and the edge exists in layer l.
struct FoldAssignment {
    std::size_t folds = 0;
    std::vector<NodePair> pairs;  // sorted
    std::vector<int> fold_of;     // aligned with `pairs`

    int fold(NodePair p) const;
    std::vector<NodePair> pairs_in(int fold) const;
    /// Positive triples of a fold, by projecting its pairs onto the layers.
    TripleList project(const MultilayerGraph& g, int fold) const;

    /// Round r: fold r is test, fold (r + 1) mod F is validation.
    int test_fold(std::size_t round) const { return static_cast<int>(round % folds); }
    int validation_fold(std::size_t round) const { return static_cast<int>((round + 1) % folds); }
};

/// Shuffles the linked pairs with `seed` and deals them round-robin.
/// Needs folds >= 3 and at least `folds` pairs.
FoldAssignment kfold_pair_split(const MultilayerGraph& g, std::size_t folds, std::uint64_t seed);

enum class NegativeStrategy { Uniform, DegreeMatched };

NegativeStrategy negative_strategy_from_string(std::string_view s);
std::string_view to_string(NegativeStrategy s);

/// Unordered pair keys (NodePair::key()).
using PairSet = std::unordered_set<std::uint64_t>;

/// Draws `count` distinct unlinked pairs from V_l. Uniform picks both
/// endpoints uniformly; degree-matched picks each endpoint with probability
/// proportional to its layer degree. Self-pairs, edges of the layer (either
/// direction), repeats and members of `exclusion` are rejected. Gives up
/// after 50 * count attempts with a SamplingError.
TripleList sample_negatives(const MultilayerGraph& g, LayerIndex l, std::size_t count, NegativeStrategy strategy,
                            const PairSet& exclusion, std::uint64_t seed);

struct RoundSplit {
    std::size_t round = 0;
    int test_fold = 0;
    int validation_fold = 0;
    /// Positives first (pair order, then layer), then negatives by layer.
    TripleList train;
    TripleList validation;
    TripleList test;
    /// Pairs hidden from the observation graph (validation + test).
    std::vector<NodePair> held_out;

    const TripleList& of(SplitRole role) const;
};

/// Positives by projection plus, per layer and split, as many negatives as
/// positives. Negative sets of different splits are disjoint; each split's
/// sampler has its own seed derived from (seed, round, role, layer).
RoundSplit build_round(const MultilayerGraph& g, const FoldAssignment& folds, std::size_t round,
                       NegativeStrategy strategy, std::uint64_t seed);

// ---------------------------------------------------------------- metrics

/// 1 + number of negatives scoring >= the positive (ties count against it).
std::size_t rank_of_positive(double positive, std::span<const double> negatives);

struct MetricRow {
    std::size_t queries = 0;
    double mrr = 0.0;
    std::vector<std::size_t> ks;
    std::vector<double> hits;

    double hits_at(std::size_t k) const;
};

struct LayerQueries {
    LayerIndex layer = 0;
    std::vector<double> positives;
    std::vector<double> negatives;
};

/// Per-layer scored queries; each positive is ranked against the negatives
/// of its own layer.
struct QuerySet {
    std::vector<LayerQueries> layers;
};

/// Groups scored triples by layer and label. Layers without positives are dropped.
QuerySet make_query_set(std::span<const LabeledTriple> triples, std::span<const double> scores);

struct MetricReport {
    MetricRow pooled;
    std::vector<std::pair<LayerIndex, MetricRow>> per_layer;
};

inline constexpr std::size_t kDefaultHits[] = {1, 5, 10};

/// MRR and Hits@k pooled over all queries, plus per-layer rows.
MetricReport compute_metrics(const QuerySet& queries, std::span<const std::size_t> ks = kDefaultHits);

/// One results row: a model's metrics on one fold and one layer (or pooled).
struct ResultRow {
    std::string model;
    std::size_t fold = 0;
    std::string layer;  // "all" for pooled rows
    bool out_of_time = false;
    MetricRow metrics;
};

struct ModelSummary {
    std::string model;
    std::size_t folds = 0;
    std::size_t out_of_time = 0;
    double mrr_mean = 0.0, mrr_std = 0.0;
    std::vector<std::size_t> ks;
    std::vector<double> hits_mean, hits_std;
};

/// Mean and population std of pooled rows per model, in first-seen model order.
std::vector<ModelSummary> summarize(std::span<const ResultRow> rows);

// -------------------------------------------------------------- ensembles

/// Mean of the expert probabilities.
double ens_s_predict(std::span<const double> probabilities);

struct EnsWConfig {
    double learning_rate = 1e-2;
    double weight_decay = 0.0;
    std::size_t batch_size = 128;
    std::size_t patience = 5;
    std::size_t max_epochs = 200;
    std::uint64_t seed = 1;
};

struct EnsWModel {
    std::vector<double> weights;
    TrainingHistory history;
};

/// sigma(w . probabilities).
double ens_w_predict(std::span<const double> weights, std::span<const double> probabilities);

/// A single input-independent weight vector, trained from w = 0 with the
/// gater's Adam/early-stopping loop.
EnsWModel train_ens_w(const Matrix& train_probabilities, std::span<const int> train_labels,
                      const Matrix& validation_probabilities, std::span<const int> validation_labels,
                      const EnsWConfig& config);

// --------------------------------------------------------------- analyses

struct UniqueCorrect {
    std::vector<std::size_t> correct;
    std::vector<std::size_t> unique;
    /// unique / correct (0 when the expert is never correct).
    std::vector<double> of_own_correct;
    /// unique / all triples.
    std::vector<double> of_all;
};

/// An expert is correct on a triple when (probability >= 0.5) matches the
/// label; unique when every other expert is wrong there.
UniqueCorrect unique_correct_fractions(const Matrix& probabilities, std::span<const int> labels);

struct QuantileRow {
    HeuristicId heuristic = HeuristicId::CN;
    std::size_t bin = 0;
    std::size_t count = 0;
    double share = 0.0;  // fraction of triples in the bin
    double low = 0.0;
    double high = 0.0;
    std::vector<double> mean_weight;
};

struct GatingReport {
    std::vector<double> mean;
    std::vector<double> stdev;
    std::vector<QuantileRow> quantiles;
};

/// Mean/std routing weight per expert, and mean weight per expert within
/// equal-population bins of each heuristic's score (stable rank order).
GatingReport gating_weight_report(const Matrix& weights, const Matrix& heuristic_scores,
                                  std::span<const HeuristicId> heuristics, std::size_t quantiles = 4);
/// Same, routing `raw_features` (unscaled h_uvl) through a trained gater.
GatingReport gating_weight_report(const GaterModel& model, const Matrix& raw_features,
                                  std::span<const HeuristicId> heuristics, std::size_t quantiles = 4);

}  // namespace mole
