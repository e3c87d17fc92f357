#include "mole/gating.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mole/errors.hpp"
#include "mole/util.hpp"

namespace mole {

std::string describe(const Routing& routing) {
    if (routing.mode == RoutingMode::Dense) return "dense";
    return "top" + std::to_string(routing.k);
}

void GaterConfig::validate() const {
    if (input_dim < 1 || experts < 1) throw DomainError("gater needs at least one input and one expert");
    if (hidden_size < 1) throw DomainError("hidden size must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw DomainError("dropout must lie in [0, 1)");
    if (batch_size < 1) throw DomainError("batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw DomainError("learning rate must be positive");
    if (weight_decay < 0.0) throw DomainError("weight decay must be non-negative");
    if (routing.mode == RoutingMode::TopK && (routing.k < 1 || routing.k > experts))
        throw DomainError("top-k routing needs 1 <= K <= n");
}

GaterModel init_gater(const GaterConfig& config) {
    config.validate();
    std::vector<std::size_t> sizes{config.input_dim};
    for (std::size_t i = 0; i < config.hidden_layers; ++i) sizes.push_back(config.hidden_size);
    sizes.push_back(config.experts);
    GaterModel model;
    model.config = config;
    model.net = Mlp::glorot(sizes, derive_seed(config.seed, {0x9a7eULL}));
    model.moments = AdamMoments(model.net.parameter_count());
    return model;
}

std::vector<double> route(std::span<const double> logits, const Routing& routing) {
    const std::size_t n = logits.size();
    std::vector<char> active(n, 1);
    if (routing.mode == RoutingMode::TopK) {
        if (routing.k < 1 || routing.k > n) throw ContractError("top-k routing needs 1 <= K <= n");
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
        std::fill(active.begin(), active.end(), 0);
        for (std::size_t i = 0; i < routing.k; ++i) active[idx[i]] = 1;
    }
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i)
        if (active[i]) top = std::max(top, logits[i]);
    std::vector<double> w(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (active[i]) total += w[i] = std::exp(logits[i] - top);
    for (auto& x : w) x /= total;
    return w;
}

std::vector<double> gate_forward(const GaterModel& model, std::span<const double> features, const Routing& routing,
                                 Rng* dropout_rng, GateTrace* trace) {
    if (features.size() != model.net.input_dim()) throw ContractError("gater input has wrong dimension");
    auto logits = mlp_forward(model.net, features, model.config.dropout, dropout_rng, trace ? &trace->mlp : nullptr);
    auto w = route(logits, routing);
    if (trace) {
        trace->logits = std::move(logits);
        trace->weights = w;
    }
    return w;
}

double moe_predict(std::span<const double> weights, std::span<const double> expert_scores) {
    if (weights.size() != expert_scores.size()) throw ContractError("weights and expert scores differ in length");
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * expert_scores[i];
    return sigmoid(s);
}

double bce_loss(std::span<const double> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw ContractError("predictions and labels differ in length");
    double loss = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double p = std::clamp(predictions[i], 1e-12, 1.0 - 1e-12);
        loss -= labels[i] ? std::log(p) : std::log(1.0 - p);
    }
    return loss;
}

void GaterBatch::check(const GaterModel& model) const {
    if (features.rows != labels.size() || scores.rows != labels.size())
        throw ContractError("gater batch is not row-aligned");
    if (features.cols != model.net.input_dim()) throw ContractError("gater batch has wrong feature width");
    if (scores.cols != model.net.output_dim()) throw ContractError("gater batch has wrong expert count");
}

GaterGradients gater_gradients(const GaterModel& model, const GaterBatch& batch, const Routing& routing,
                               Rng* dropout_rng, std::span<const std::size_t> rows) {
    batch.check(model);
    GaterGradients out;
    out.values.assign(model.net.parameter_count(), 0.0);
    const std::size_t n = model.net.output_dim();
    GateTrace trace;
    std::vector<double> grad_logits(n);

    auto one = [&](std::size_t r) {
        auto w = gate_forward(model, batch.features.row(r), routing, dropout_rng, &trace);
        auto e = batch.scores.row(r);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += w[i] * e[i];
        const double y_hat = sigmoid(s);
        const int y = batch.labels[r];
        {
            const double p = std::clamp(y_hat, 1e-12, 1.0 - 1e-12);
            out.loss -= y ? std::log(p) : std::log(1.0 - p);
        }
        // dL/ds = y_hat - y; dL/dw_i = (y_hat - y) E_i; softmax Jacobian over
        // the active set. Masked logits have w_i = 0 and get no gradient.
        const double ds = y_hat - y;
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += w[i] * e[i];
        for (std::size_t i = 0; i < n; ++i) grad_logits[i] = w[i] == 0.0 ? 0.0 : ds * w[i] * (e[i] - mean);
        mlp_backward(model.net, trace.mlp, grad_logits, out.values);
    };
    if (rows.empty()) {
        for (std::size_t r = 0; r < batch.size(); ++r) one(r);
    } else {
        for (std::size_t r : rows) one(r);
    }
    return out;
}

void adam_step(GaterModel& model, const GaterGradients& gradients, std::size_t step) {
    AdamOptions opt;
    opt.learning_rate = model.config.learning_rate;
    opt.weight_decay = model.config.weight_decay;
    auto mask = model.net.weight_mask();
    adam_update(model.net.params(), gradients.values, model.moments, opt, step, mask);
    model.steps = step;
}

TrainingHistory fit_with_early_stopping(
    std::span<double> params, AdamMoments& moments, std::size_t& steps, std::span<const char> decay_mask,
    std::size_t rows, const EarlyStopping& options,
    const std::function<double(std::span<const std::size_t>, std::span<double>)>& batch_grad,
    const std::function<double()>& validation_loss) {
    if (rows == 0) throw DomainError("training split is empty");
    if (options.batch_size < 1) throw DomainError("batch size must be >= 1");

    TrainingHistory history;
    Rng shuffle_rng(derive_seed(options.seed, {0x5f1ULL}));
    std::vector<std::size_t> order(rows);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> grad(params.size());

    std::vector<double> best_params(params.begin(), params.end());
    AdamMoments best_moments = moments;
    std::size_t best_steps = steps;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= options.max_epochs; ++epoch) {
        shuffle_rng.shuffle(std::span<std::size_t>(order));
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < rows; start += options.batch_size) {
            const std::size_t end = std::min(rows, start + options.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0);
            const std::span<const std::size_t> batch(order.data() + start, end - start);
            epoch_loss += batch_grad(batch, grad);
            const double scale = 1.0 / static_cast<double>(end - start);
            for (double& g : grad) g *= scale;
            adam_update(params, grad, moments, options.adam, ++steps, decay_mask);
            ++batches;
        }
        const double val = validation_loss();
        if (!std::isfinite(val)) throw TrainingError("validation loss is not finite");
        history.train_loss.push_back(epoch_loss / static_cast<double>(batches));
        history.val_loss.push_back(val);
        if (val < best_val) {
            best_val = val;
            history.best_epoch = epoch;
            std::copy(params.begin(), params.end(), best_params.begin());
            best_moments = moments;
            best_steps = steps;
            since_best = 0;
        } else if (++since_best >= options.patience) {
            break;
        }
    }
    std::copy(best_params.begin(), best_params.end(), params.begin());
    moments = std::move(best_moments);
    steps = best_steps;
    return history;
}

double gater_epoch_loss(const GaterModel& model, const GaterBatch& batch, const Routing& routing) {
    batch.check(model);
    if (batch.size() == 0) throw DomainError("validation split is empty");
    const std::size_t bs = model.config.batch_size;
    double total = 0.0;
    std::size_t batches = 0;
    std::vector<double> preds;
    std::vector<int> labels;
    for (std::size_t start = 0; start < batch.size(); start += bs) {
        const std::size_t end = std::min(batch.size(), start + bs);
        preds.clear();
        labels.clear();
        for (std::size_t r = start; r < end; ++r) {
            auto w = gate_forward(model, batch.features.row(r), routing);
            preds.push_back(moe_predict(w, batch.scores.row(r)));
            labels.push_back(batch.labels[r]);
        }
        total += bce_loss(preds, labels);
        ++batches;
    }
    return total / static_cast<double>(batches);
}

GaterModel train_gater(GaterModel model, const GaterBatch& train, const GaterBatch& validation) {
    if (train.size() == 0 || validation.size() == 0) throw DomainError("gater training needs non-empty splits");
    train.check(model);
    validation.check(model);
    const auto& cfg = model.config;

    EarlyStopping options;
    options.batch_size = cfg.batch_size;
    options.patience = cfg.patience;
    options.max_epochs = cfg.max_epochs;
    options.seed = cfg.seed;
    options.adam.learning_rate = cfg.learning_rate;
    options.adam.weight_decay = cfg.weight_decay;

    Rng dropout_rng(derive_seed(cfg.seed, {0xd70ULL}));
    const Routing train_routing = cfg.training_routing();
    auto mask = model.net.weight_mask();
    auto batch_grad = [&](std::span<const std::size_t> rows, std::span<double> grad) {
        auto g = gater_gradients(model, train, train_routing, cfg.dropout > 0.0 ? &dropout_rng : nullptr, rows);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g.values[i];
        return g.loss;
    };
    auto val_loss = [&] { return gater_epoch_loss(model, validation, cfg.routing); };
    model.history = fit_with_early_stopping(model.net.params(), model.moments, model.steps, mask, train.size(),
                                            options, batch_grad, val_loss);
    return model;
}

PredictionBatch gater_predict(const GaterModel& model, const Matrix& standardized_features, const Matrix& scores,
                              const Routing& routing) {
    if (standardized_features.rows != scores.rows) throw ContractError("features and scores are not row-aligned");
    PredictionBatch out;
    out.weights = Matrix(scores.rows, scores.cols);
    out.predictions.resize(scores.rows);
    for (std::size_t r = 0; r < scores.rows; ++r) {
        auto w = gate_forward(model, standardized_features.row(r), routing);
        std::copy(w.begin(), w.end(), out.weights.row(r).begin());
        out.predictions[r] = moe_predict(w, scores.row(r));
    }
    return out;
}

}  // namespace mole
