#pragma once

#include <cstdint>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mole/graph.hpp"
#include "mole/matrix.hpp"
#include "mole/triples.hpp"

namespace mole {

/// Heuristic registry. Enumerator order is the canonical feature order.
enum class HeuristicId { CN = 0, JC = 1, AA = 2, PPR = 3 };

inline constexpr HeuristicId kAllHeuristics[] = {HeuristicId::CN, HeuristicId::JC, HeuristicId::AA,
                                                 HeuristicId::PPR};

std::string_view to_string(HeuristicId id);
HeuristicId heuristic_from_string(std::string_view name);

/// Deduplicates and sorts into registry order. Throws on an empty set.
std::vector<HeuristicId> normalize_heuristics(std::vector<HeuristicId> set);

struct PprParams {
    double beta = 0.85;
    double tolerance = 1e-10;
    std::size_t max_iterations = 1000;

    void validate() const;
};

struct PprResult {
    std::vector<double> scores;
    bool converged = false;
    std::size_t iterations = 0;
};

// Single-layer scores. u == v is rejected; neighborhoods follow `mode` on
// directed layers.
std::size_t common_neighbors(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l,
                             NeighborMode mode = NeighborMode::Union);
double jaccard(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l, NeighborMode mode = NeighborMode::Union);
/// Natural-log Adamic-Adar; common neighbors of degree 1 contribute nothing.
double adamic_adar(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l,
                   NeighborMode mode = NeighborMode::Union);

/// Personalized PageRank from `source` by power iteration on the undirected
/// view of layer l. Dangling nodes send their mass back to the source.
PprResult ppr_vector(const MultilayerGraph& g, LayerIndex l, NodeId source, const PprParams& params = {});

/// Symmetrized pair score (r_u(v) + r_v(u)) / 2.
double ppr_pair(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l, const PprParams& params = {});

/// Blends the target layer's score with the mean of the other layers:
/// alpha * s[target] + (1 - alpha) * mean_{l != target} s[l].
/// alpha must lie in (0, 1); alpha == 1 is accepted only with `allow_reduction`.
double multilayer_score(std::span<const double> per_layer, LayerIndex target, double alpha,
                        bool allow_reduction = false);

struct HeuristicOptions {
    NeighborMode mode = NeighborMode::Union;
    PprParams ppr;
};

/// Heuristic evaluation over one immutable graph, with a PPR memo keyed by
/// (source, layer). Safe to call from several threads at once.
///
/// With `exclude_pair` set, a score is computed as if any direct link
/// between u and v were absent from every layer. Training positives use this
/// so their features match held-out pairs, which are masked by the split.
class HeuristicEngine {
public:
    HeuristicEngine(const MultilayerGraph& g, HeuristicOptions options = {});

    const MultilayerGraph& graph() const { return graph_; }
    const HeuristicOptions& options() const { return options_; }

    double score(HeuristicId h, NodeId u, NodeId v, LayerIndex l, bool exclude_pair = false) const;

    /// Memoized PPR vector from `source` on layer l.
    std::shared_ptr<const std::vector<double>> ppr(NodeId source, LayerIndex l) const;

    std::size_t cached_vectors() const;
    std::size_t unconverged_vectors() const;

private:
    double ppr_score(NodeId u, NodeId v, LayerIndex l, bool exclude_pair) const;

    const MultilayerGraph& graph_;
    HeuristicOptions options_;
    mutable std::shared_mutex mutex_;
    mutable std::unordered_map<std::uint64_t, std::shared_ptr<const std::vector<double>>> vectors_;
    mutable std::vector<std::unordered_map<std::uint64_t, double>> masked_pairs_;
    mutable std::size_t unconverged_ = 0;
};

/// Column layout of per-layer raw scores: column h * layers + l holds
/// heuristic `heuristics[h]` evaluated on layer l.
struct FeatureLayout {
    std::vector<HeuristicId> heuristics;
    std::size_t layers = 0;

    std::size_t width() const { return heuristics.size() * layers; }
    std::size_t column(std::size_t h, LayerIndex l) const { return h * layers + l; }
};

struct LayerFeatureTable {
    FeatureLayout layout;
    Matrix values;
};

/// Per-layer raw scores for each triple. Rows are independent so the work is
/// split across `threads` workers without affecting the result.
LayerFeatureTable extract_layer_features(const HeuristicEngine& engine, std::span<const LabeledTriple> triples,
                                         std::vector<HeuristicId> heuristics, bool exclude_pair = false,
                                         unsigned threads = 1);

/// Aggregated multilayer feature rows h_uvl (rows x k) at the given alpha.
Matrix aggregate_features(const LayerFeatureTable& table, std::span<const LabeledTriple> triples, double alpha);

/// Keeps only the listed heuristics (must be present in the table).
LayerFeatureTable select_heuristics(const LayerFeatureTable& table, std::vector<HeuristicId> heuristics);

struct HeuristicFeatureVector {
    LabeledTriple triple;
    std::vector<HeuristicId> heuristics;
    std::vector<double> values;
};

/// One triple's multilayer feature vector, evaluated directly on `g`.
HeuristicFeatureVector heuristic_features(const MultilayerGraph& g, const LabeledTriple& triple,
                                          std::vector<HeuristicId> heuristics, double alpha,
                                          const HeuristicOptions& options = {});

/// Per-dimension z-scoring fitted on training rows (population variance).
/// Dimensions with std below 1e-12 are centered only.
class FeatureScaler {
public:
    FeatureScaler() = default;
    FeatureScaler(std::vector<double> mean, std::vector<double> stdev);

    static FeatureScaler fit(const Matrix& rows);

    std::vector<double> apply(std::span<const double> row) const;
    Matrix apply(const Matrix& rows) const;

    const std::vector<double>& mean() const { return mean_; }
    const std::vector<double>& stdev() const { return stdev_; }
    std::size_t dim() const { return mean_.size(); }

private:
    std::vector<double> mean_;
    std::vector<double> stdev_;
};

}  // namespace mole
