#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mole/heuristics.hpp"
#include "mole/matrix.hpp"
#include "mole/nn.hpp"
#include "mole/triples.hpp"

namespace mole {

/// Everything an expert may look at when scoring one triple: the triple
/// itself and its per-layer raw heuristic scores.
struct ExpertInput {
    const LabeledTriple& triple;
    std::span<const double> features;
    const FeatureLayout& layout;
};

/// A link scorer trained on its own and then frozen.
///
/// raw_score() is on the logit scale (what the gater mixes); probability()
/// is its sigmoid (what the mean ensemble averages). Frozen experts never
/// change their parameters, so scoring is a pure function of the input.
class Expert {
public:
    virtual ~Expert() = default;

    const std::string& name() const { return name_; }
    virtual std::string_view kind() const = 0;

    virtual double raw_score(const ExpertInput& input) const = 0;
    double probability(const ExpertInput& input) const;

    bool frozen() const { return frozen_; }

    /// Kind-specific settings (everything needed besides the parameters).
    virtual nlohmann::json config() const = 0;
    virtual std::vector<double> parameters() const = 0;

    /// Digest of kind, config and parameters.
    std::string digest() const;

protected:
    explicit Expert(std::string name) : name_(std::move(name)) {}
    void freeze() { frozen_ = true; }

private:
    std::string name_;
    bool frozen_ = false;
};

using ExpertPtr = std::shared_ptr<const Expert>;

/// Logistic calibration a * H(u,v,l) + b of one multilayer heuristic.
class HeuristicExpert final : public Expert {
public:
    HeuristicExpert(std::string name, HeuristicId heuristic, double alpha, double scale, double bias);

    std::string_view kind() const override { return "heuristic"; }
    double raw_score(const ExpertInput& input) const override;
    nlohmann::json config() const override;
    std::vector<double> parameters() const override { return {scale_, bias_}; }

    HeuristicId heuristic() const { return heuristic_; }
    double scale() const { return scale_; }
    double bias() const { return bias_; }

private:
    HeuristicId heuristic_;
    double alpha_;
    double scale_;
    double bias_;
};

/// Per-layer node embeddings; raw score is the dot product <z_u^l, z_v^l>.
class EmbeddingExpert final : public Expert {
public:
    EmbeddingExpert(std::string name, std::size_t nodes, std::size_t layers, std::size_t dim,
                    std::vector<double> table, nlohmann::json training);

    std::string_view kind() const override { return "embedding"; }
    double raw_score(const ExpertInput& input) const override;
    double dot(NodeId u, NodeId v, LayerIndex l) const;
    nlohmann::json config() const override;
    std::vector<double> parameters() const override { return table_; }

private:
    std::size_t nodes_;
    std::size_t layers_;
    std::size_t dim_;
    std::vector<double> table_;  // [layer][node][dim]
    nlohmann::json training_;
};

/// One-hidden-layer network over the target-relative per-layer features:
/// the target layer's scores first, then the other layers in index order,
/// for each heuristic. Inputs are z-scored with training statistics.
class FeatureMlpExpert final : public Expert {
public:
    FeatureMlpExpert(std::string name, FeatureLayout layout, FeatureScaler scaler, Mlp net, nlohmann::json training);

    std::string_view kind() const override { return "feature_mlp"; }
    double raw_score(const ExpertInput& input) const override;
    nlohmann::json config() const override;
    std::vector<double> parameters() const override;

    const Mlp& network() const { return net_; }

private:
    FeatureLayout layout_;
    FeatureScaler scaler_;
    Mlp net_;
    nlohmann::json training_;
};

/// Reorders one row of per-layer features so the target layer comes first.
std::vector<double> target_relative(std::span<const double> features, const FeatureLayout& layout, LayerIndex target);

struct HeuristicExpertConfig {
    std::string name = "heuristic";
    HeuristicId heuristic = HeuristicId::AA;
    double alpha = 0.5;
    std::size_t iterations = 500;
    double learning_rate = 0.05;
};

struct EmbeddingExpertConfig {
    std::string name = "embedding";
    std::size_t dim = 16;
    std::size_t epochs = 30;
    double learning_rate = 0.05;
    std::size_t negative_ratio = 1;
    std::uint64_t seed = 1;
};

struct FeatureMlpExpertConfig {
    std::string name = "feature_mlp";
    std::size_t hidden = 16;
    std::size_t epochs = 40;
    double learning_rate = 1e-2;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
};

/// Fits the calibration by full-batch Adam on mean BCE.
/// Throws CalibrationError when the training triples hold a single label.
std::shared_ptr<HeuristicExpert> train_heuristic_expert(const LayerFeatureTable& features,
                                                        std::span<const LabeledTriple> train,
                                                        const HeuristicExpertConfig& config);
std::shared_ptr<HeuristicExpert> train_heuristic_expert(const MultilayerGraph& g, HeuristicId heuristic,
                                                        std::span<const LabeledTriple> train, double alpha);

/// SGD on BCE of sigmoid(<z_u, z_v>). Each epoch visits every training
/// positive and draws `negative_ratio` negatives per positive. With
/// `forbidden` (one set of pair keys per layer) negatives are fresh unlinked
/// pairs of V_l outside that set; otherwise they come from the training
/// negatives of the same layer.
std::shared_ptr<EmbeddingExpert> train_embedding_expert(
    const MultilayerGraph& g, std::span<const LabeledTriple> train, const EmbeddingExpertConfig& config,
    std::span<const std::unordered_set<std::uint64_t>> forbidden = {});

/// Mean BCE of an embedding expert over the given triples.
double embedding_loss(const EmbeddingExpert& expert, std::span<const LabeledTriple> triples);

std::shared_ptr<FeatureMlpExpert> train_feature_mlp_expert(const LayerFeatureTable& features,
                                                           std::span<const LabeledTriple> train,
                                                           const FeatureMlpExpertConfig& config);

/// Raw expert scores, one column per expert in registry order.
struct ExpertScoreMatrix {
    std::vector<std::string> columns;
    std::vector<LabeledTriple> triples;
    Matrix raw;

    Matrix probabilities() const;
    ExpertScoreMatrix select(std::span<const std::size_t> columns) const;
};

/// Scores every triple with every expert. Throws ContractError if any
/// expert is not frozen. The result does not depend on `threads`.
ExpertScoreMatrix precompute_score_matrix(std::span<const ExpertPtr> experts, std::span<const LabeledTriple> triples,
                                          const LayerFeatureTable& features, unsigned threads = 1);

/// Expert header (kind, name, config, digest) for persistence.
nlohmann::json expert_header(const Expert& expert);
/// Rebuilds a frozen expert from its header and parameter vector.
ExpertPtr load_expert(const nlohmann::json& header, std::span<const double> parameters);

}  // namespace mole
