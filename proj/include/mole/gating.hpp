#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mole/heuristics.hpp"
#include "mole/matrix.hpp"
#include "mole/nn.hpp"
#include "mole/random.hpp"

namespace mole {

enum class RoutingMode { Dense, TopK };

/// Dense softmax, or softmax restricted to the k largest logits.
struct Routing {
    RoutingMode mode = RoutingMode::Dense;
    std::size_t k = 0;

    static Routing dense() { return {}; }
    static Routing top_k(std::size_t k) { return {RoutingMode::TopK, k}; }
};

std::string describe(const Routing& routing);

struct GaterConfig {
    std::size_t input_dim = 4;
    std::size_t experts = 3;
    std::size_t hidden_layers = 2;
    std::size_t hidden_size = 16;
    double dropout = 0.3;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    std::size_t batch_size = 128;
    std::size_t patience = 5;
    std::size_t max_epochs = 200;
    /// Routing at inference (and validation).
    Routing routing;
    /// Also route top-k while training; otherwise training is dense.
    bool topk_in_training = false;
    std::uint64_t seed = 1;

    void validate() const;
    Routing training_routing() const { return topk_in_training ? routing : Routing::dense(); }
};

struct TrainingHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;  // 1-based; 0 before training
};

/// Gating network plus optimizer state and training record.
struct GaterModel {
    GaterConfig config;
    Mlp net;
    AdamMoments moments;
    std::size_t steps = 0;
    TrainingHistory history;
    FeatureScaler scaler;
    std::vector<std::string> expert_names;
};

/// Glorot-uniform weights, zero biases, zeroed moments.
GaterModel init_gater(const GaterConfig& config);

/// Routing weights from logits: stable softmax over all logits or over the
/// k largest (ties go to the lower index); masked weights are exactly 0.
std::vector<double> route(std::span<const double> logits, const Routing& routing);

struct GateTrace {
    MlpTrace mlp;
    std::vector<double> logits;
    std::vector<double> weights;
};

/// G(h) for one standardized feature row. Dropout is applied only when
/// `dropout_rng` is given (training).
std::vector<double> gate_forward(const GaterModel& model, std::span<const double> features, const Routing& routing,
                                 Rng* dropout_rng = nullptr, GateTrace* trace = nullptr);

/// sigma(sum_i w_i * E_i).
double moe_predict(std::span<const double> weights, std::span<const double> expert_scores);

/// Summed binary cross-entropy; predictions are clamped to [1e-12, 1 - 1e-12].
double bce_loss(std::span<const double> predictions, std::span<const int> labels);

/// Standardized features, raw expert scores and labels, row-aligned.
struct GaterBatch {
    Matrix features;
    Matrix scores;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    void check(const GaterModel& model) const;
};

struct GaterGradients {
    std::vector<double> values;  // layout of model.net.params()
    double loss = 0.0;           // summed BCE of the pass
};

/// Exact gradients of the summed BCE over `rows` of the batch (all rows when
/// empty). Dropout masks are drawn once per row during the forward pass.
GaterGradients gater_gradients(const GaterModel& model, const GaterBatch& batch, const Routing& routing,
                               Rng* dropout_rng = nullptr, std::span<const std::size_t> rows = {});

/// Adam step with the model's learning rate and decoupled weight decay on
/// weights (not biases). `step` is 1-based.
void adam_step(GaterModel& model, const GaterGradients& gradients, std::size_t step);

struct EarlyStopping {
    std::size_t batch_size = 128;
    std::size_t patience = 5;
    std::size_t max_epochs = 200;
    std::uint64_t seed = 1;
    AdamOptions adam;
};

/// Epoch loop shared by the gater and the weighted ensemble: seeded shuffle,
/// mini-batches, Adam on the batch-mean gradient, validation after every
/// epoch, best-snapshot restore, stop after `patience` epochs without
/// improvement. `batch_grad` accumulates the gradient of the summed loss and
/// returns that sum; both per-epoch losses are divided by the batch count.
TrainingHistory fit_with_early_stopping(
    std::span<double> params, AdamMoments& moments, std::size_t& steps, std::span<const char> decay_mask,
    std::size_t rows, const EarlyStopping& options,
    const std::function<double(std::span<const std::size_t>, std::span<double>)>& batch_grad,
    const std::function<double()>& validation_loss);

/// Summed BCE per batch of `batch_size`, divided by the batch count.
double gater_epoch_loss(const GaterModel& model, const GaterBatch& batch, const Routing& routing);

/// Trains the gating network against frozen expert scores. Returns the best
/// validation snapshot with its history.
GaterModel train_gater(GaterModel model, const GaterBatch& train, const GaterBatch& validation);

struct PredictionBatch {
    std::vector<double> predictions;
    Matrix weights;
};

PredictionBatch gater_predict(const GaterModel& model, const Matrix& standardized_features, const Matrix& scores,
                              const Routing& routing);
inline PredictionBatch gater_predict(const GaterModel& model, const Matrix& standardized_features,
                                     const Matrix& scores) {
    return gater_predict(model, standardized_features, scores, model.config.routing);
}

}  // namespace mole
