#include "mole/experts.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "mole/errors.hpp"
#include "mole/util.hpp"

namespace mole {

double Expert::probability(const ExpertInput& input) const { return sigmoid(raw_score(input)); }

std::string Expert::digest() const {
    Fnv1a h;
    h.update(kind());
    h.update(name());
    h.update(config().dump());
    auto p = parameters();
    h.update(std::span<const double>(p));
    return h.hex();
}

namespace {

std::size_t heuristic_position(const FeatureLayout& layout, HeuristicId h) {
    auto it = std::find(layout.heuristics.begin(), layout.heuristics.end(), h);
    if (it == layout.heuristics.end())
        throw ContractError("feature table lacks heuristic " + std::string(to_string(h)));
    return static_cast<std::size_t>(it - layout.heuristics.begin());
}

double multilayer_from_row(std::span<const double> row, const FeatureLayout& layout, std::size_t pos,
                           LayerIndex target, double alpha) {
    std::vector<double> per_layer(layout.layers);
    for (LayerIndex l = 0; l < layout.layers; ++l) per_layer[l] = row[layout.column(pos, l)];
    return multilayer_score(per_layer, target, alpha);
}

void require_both_labels(std::span<const LabeledTriple> train) {
    bool pos = false;
    bool neg = false;
    for (const auto& t : train) (t.label ? pos : neg) = true;
    if (!pos || !neg) throw CalibrationError("training triples must contain both labels");
}

nlohmann::json layout_json(const FeatureLayout& layout) {
    nlohmann::json hs = nlohmann::json::array();
    for (auto h : layout.heuristics) hs.push_back(std::string(to_string(h)));
    return {{"heuristics", hs}, {"layers", layout.layers}};
}

FeatureLayout layout_from_json(const nlohmann::json& j) {
    FeatureLayout layout;
    for (const auto& h : j.at("heuristics")) layout.heuristics.push_back(heuristic_from_string(h.get<std::string>()));
    layout.layers = j.at("layers").get<std::size_t>();
    return layout;
}

bool same_layout(const FeatureLayout& a, const FeatureLayout& b) {
    return a.heuristics == b.heuristics && a.layers == b.layers;
}

double bce(double p, int y) {
    p = std::clamp(p, 1e-12, 1.0 - 1e-12);
    return y ? -std::log(p) : -std::log(1.0 - p);
}

}  // namespace

// ---------------------------------------------------------------------------

HeuristicExpert::HeuristicExpert(std::string name, HeuristicId heuristic, double alpha, double scale, double bias)
    : Expert(std::move(name)), heuristic_(heuristic), alpha_(alpha), scale_(scale), bias_(bias) {
    freeze();
}

double HeuristicExpert::raw_score(const ExpertInput& input) const {
    const auto pos = heuristic_position(input.layout, heuristic_);
    return scale_ * multilayer_from_row(input.features, input.layout, pos, input.triple.layer, alpha_) + bias_;
}

nlohmann::json HeuristicExpert::config() const {
    return {{"heuristic", std::string(to_string(heuristic_))}, {"alpha", alpha_}};
}

std::shared_ptr<HeuristicExpert> train_heuristic_expert(const LayerFeatureTable& features,
                                                        std::span<const LabeledTriple> train,
                                                        const HeuristicExpertConfig& config) {
    require_both_labels(train);
    if (features.values.rows != train.size()) throw ContractError("feature rows do not match training triples");
    const auto pos = heuristic_position(features.layout, config.heuristic);

    std::vector<double> x(train.size());
    for (std::size_t r = 0; r < train.size(); ++r)
        x[r] = multilayer_from_row(features.values.row(r), features.layout, pos, train[r].layer, config.alpha);

    // Fit on the standardized score, then map back to the raw scale.
    const double n = static_cast<double>(x.size());
    double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    double sd = std::sqrt(var / n);
    if (sd < 1e-12) sd = 1.0;
    for (double& v : x) v = (v - mean) / sd;

    std::vector<double> theta{0.0, 0.0};  // slope, intercept
    AdamMoments moments(2);
    AdamOptions opt;
    opt.learning_rate = config.learning_rate;
    for (std::size_t it = 1; it <= config.iterations; ++it) {
        double ga = 0.0;
        double gb = 0.0;
        for (std::size_t r = 0; r < x.size(); ++r) {
            double err = sigmoid(theta[0] * x[r] + theta[1]) - train[r].label;
            ga += err * x[r];
            gb += err;
        }
        std::vector<double> grad{ga / n, gb / n};
        adam_update(theta, grad, moments, opt, it);
    }
    const double scale = theta[0] / sd;
    const double bias = theta[1] - theta[0] * mean / sd;
    return std::make_shared<HeuristicExpert>(config.name, config.heuristic, config.alpha, scale, bias);
}

std::shared_ptr<HeuristicExpert> train_heuristic_expert(const MultilayerGraph& g, HeuristicId heuristic,
                                                        std::span<const LabeledTriple> train, double alpha) {
    HeuristicEngine engine(g);
    auto features = extract_layer_features(engine, train, {heuristic});
    HeuristicExpertConfig config;
    config.name = "m" + std::string(to_string(heuristic));
    config.heuristic = heuristic;
    config.alpha = alpha;
    return train_heuristic_expert(features, train, config);
}

// ---------------------------------------------------------------------------

EmbeddingExpert::EmbeddingExpert(std::string name, std::size_t nodes, std::size_t layers, std::size_t dim,
                                 std::vector<double> table, nlohmann::json training)
    : Expert(std::move(name)),
      nodes_(nodes),
      layers_(layers),
      dim_(dim),
      table_(std::move(table)),
      training_(std::move(training)) {
    if (table_.size() != nodes_ * layers_ * dim_) throw ContractError("embedding table has wrong size");
    freeze();
}

double EmbeddingExpert::dot(NodeId u, NodeId v, LayerIndex l) const {
    if (u >= nodes_ || v >= nodes_ || l >= layers_) throw DomainError("embedding lookup out of range");
    const double* zu = table_.data() + (static_cast<std::size_t>(l) * nodes_ + u) * dim_;
    const double* zv = table_.data() + (static_cast<std::size_t>(l) * nodes_ + v) * dim_;
    double acc = 0.0;
    for (std::size_t d = 0; d < dim_; ++d) acc += zu[d] * zv[d];
    return acc;
}

double EmbeddingExpert::raw_score(const ExpertInput& input) const {
    return dot(input.triple.u, input.triple.v, input.triple.layer);
}

nlohmann::json EmbeddingExpert::config() const {
    return {{"nodes", nodes_}, {"layers", layers_}, {"dim", dim_}, {"training", training_}};
}

std::shared_ptr<EmbeddingExpert> train_embedding_expert(const MultilayerGraph& g, std::span<const LabeledTriple> train,
                                                        const EmbeddingExpertConfig& config,
                                                        std::span<const std::unordered_set<std::uint64_t>> forbidden) {
    if (config.dim < 1) throw DomainError("embedding dim must be >= 1");
    if (!(config.learning_rate > 0.0)) throw DomainError("embedding learning rate must be positive");
    const std::size_t n = g.entity_count();
    const std::size_t layers = g.layer_count();
    const std::size_t dim = config.dim;

    std::vector<std::vector<std::size_t>> positives(layers);
    std::vector<std::vector<std::size_t>> negatives(layers);
    std::vector<std::size_t> all_negatives;
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto& t = train[i];
        if (t.layer >= layers || t.u >= n || t.v >= n) throw DomainError("training triple out of range");
        (t.label ? positives : negatives)[t.layer].push_back(i);
        if (!t.label) all_negatives.push_back(i);
    }

    Rng rng(derive_seed(config.seed, {0xe3bULL}));
    std::vector<double> table(layers * n * dim);
    const double half = 0.5 / static_cast<double>(dim);
    for (double& z : table) z = rng.uniform(-half, half);

    auto embedding = [&](NodeId u, LayerIndex l) { return table.data() + (static_cast<std::size_t>(l) * n + u) * dim; };
    std::vector<double> tmp(dim);
    auto sgd = [&](const LabeledTriple& t) {
        double* zu = embedding(t.u, t.layer);
        double* zv = embedding(t.v, t.layer);
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) s += zu[d] * zv[d];
        const double step = config.learning_rate * (sigmoid(s) - t.label);
        for (std::size_t d = 0; d < dim; ++d) tmp[d] = zu[d];
        for (std::size_t d = 0; d < dim; ++d) {
            zu[d] -= step * zv[d];
            zv[d] -= step * tmp[d];
        }
    };

    const bool fresh = !forbidden.empty();
    if (fresh && forbidden.size() != layers) throw ContractError("one forbidden-pair set per layer expected");
    std::vector<std::vector<NodeId>> members(layers);
    if (fresh)
        for (LayerIndex l = 0; l < layers; ++l) members[l] = g.layer_nodes(l);

    // A fresh negative: an unlinked, non-forbidden pair of V_l. Falls back to
    // the split's negatives when rejection keeps failing.
    auto fresh_negative = [&](LayerIndex l, LabeledTriple& out) {
        const auto& nodes = members[l];
        if (nodes.size() < 2) return false;
        for (int attempt = 0; attempt < 50; ++attempt) {
            const NodeId a = nodes[rng.index(nodes.size())];
            const NodeId b = nodes[rng.index(nodes.size())];
            if (a == b || g.linked(a, b, l) || forbidden[l].count(NodePair::of(a, b).key())) continue;
            out = {a, b, l, 0, -1};
            return true;
        }
        return false;
    };

    std::vector<std::size_t> order;
    for (std::size_t l = 0; l < layers; ++l) order.insert(order.end(), positives[l].begin(), positives[l].end());
    std::sort(order.begin(), order.end());
    LabeledTriple neg;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t idx : order) {
            const auto& pos = train[idx];
            sgd(pos);
            const auto& pool = negatives[pos.layer].empty() ? all_negatives : negatives[pos.layer];
            for (std::size_t k = 0; k < config.negative_ratio; ++k) {
                if (fresh && fresh_negative(pos.layer, neg)) {
                    sgd(neg);
                } else if (!pool.empty()) {
                    sgd(train[pool[rng.index(pool.size())]]);
                }
            }
        }
    }

    nlohmann::json training = {{"epochs", config.epochs},
                               {"learning_rate", config.learning_rate},
                               {"negative_ratio", config.negative_ratio},
                               {"fresh_negatives", fresh},
                               {"seed", config.seed}};
    return std::make_shared<EmbeddingExpert>(config.name, n, layers, dim, std::move(table), std::move(training));
}

double embedding_loss(const EmbeddingExpert& expert, std::span<const LabeledTriple> triples) {
    if (triples.empty()) return 0.0;
    double loss = 0.0;
    for (const auto& t : triples) loss += bce(sigmoid(expert.dot(t.u, t.v, t.layer)), t.label);
    return loss / static_cast<double>(triples.size());
}

// ---------------------------------------------------------------------------

std::vector<double> target_relative(std::span<const double> features, const FeatureLayout& layout, LayerIndex target) {
    if (features.size() != layout.width()) throw ContractError("feature row does not match layout");
    if (target >= layout.layers) throw DomainError("target layer out of range");
    std::vector<double> out;
    out.reserve(features.size());
    for (std::size_t h = 0; h < layout.heuristics.size(); ++h) {
        out.push_back(features[layout.column(h, target)]);
        for (LayerIndex l = 0; l < layout.layers; ++l)
            if (l != target) out.push_back(features[layout.column(h, l)]);
    }
    return out;
}

FeatureMlpExpert::FeatureMlpExpert(std::string name, FeatureLayout layout, FeatureScaler scaler, Mlp net,
                                   nlohmann::json training)
    : Expert(std::move(name)),
      layout_(std::move(layout)),
      scaler_(std::move(scaler)),
      net_(std::move(net)),
      training_(std::move(training)) {
    if (net_.input_dim() != layout_.width() || net_.output_dim() != 1 || scaler_.dim() != layout_.width())
        throw ContractError("feature MLP shape does not match its layout");
    freeze();
}

double FeatureMlpExpert::raw_score(const ExpertInput& input) const {
    if (!same_layout(input.layout, layout_)) throw ContractError("feature layout differs from the training layout");
    auto x = scaler_.apply(target_relative(input.features, layout_, input.triple.layer));
    return mlp_forward(net_, x)[0];
}

nlohmann::json FeatureMlpExpert::config() const {
    return {{"layout", layout_json(layout_)},
            {"sizes", net_.sizes()},
            {"scaler_mean", scaler_.mean()},
            {"scaler_std", scaler_.stdev()},
            {"training", training_}};
}

std::vector<double> FeatureMlpExpert::parameters() const {
    auto p = net_.params();
    return {p.begin(), p.end()};
}

std::shared_ptr<FeatureMlpExpert> train_feature_mlp_expert(const LayerFeatureTable& features,
                                                           std::span<const LabeledTriple> train,
                                                           const FeatureMlpExpertConfig& config) {
    require_both_labels(train);
    if (features.values.rows != train.size()) throw ContractError("feature rows do not match training triples");
    if (config.hidden < 1 || config.batch_size < 1) throw DomainError("hidden size and batch size must be >= 1");
    if (!(config.learning_rate > 0.0)) throw DomainError("learning rate must be positive");

    const auto& layout = features.layout;
    Matrix x(train.size(), layout.width());
    for (std::size_t r = 0; r < train.size(); ++r) {
        auto row = target_relative(features.values.row(r), layout, train[r].layer);
        std::copy(row.begin(), row.end(), x.row(r).begin());
    }
    auto scaler = FeatureScaler::fit(x);
    x = scaler.apply(x);

    Mlp net = Mlp::glorot({layout.width(), config.hidden, 1}, derive_seed(config.seed, {0xf1ULL}));
    AdamMoments moments(net.parameter_count());
    AdamOptions opt;
    opt.learning_rate = config.learning_rate;
    Rng rng(derive_seed(config.seed, {0xf2ULL}));

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> grad(net.parameter_count());
    MlpTrace trace;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t i = start; i < end; ++i) {
                const std::size_t r = order[i];
                double out = mlp_forward(net, x.row(r), 0.0, nullptr, &trace)[0];
                double g = (sigmoid(out) - train[r].label) / static_cast<double>(end - start);
                mlp_backward(net, trace, std::span<const double>(&g, 1), grad);
            }
            adam_update(net.params(), grad, moments, opt, ++step);
        }
    }

    nlohmann::json training = {{"epochs", config.epochs},
                               {"learning_rate", config.learning_rate},
                               {"batch_size", config.batch_size},
                               {"seed", config.seed}};
    return std::make_shared<FeatureMlpExpert>(config.name, layout, std::move(scaler), std::move(net),
                                              std::move(training));
}

// ---------------------------------------------------------------------------

Matrix ExpertScoreMatrix::probabilities() const {
    Matrix p(raw.rows, raw.cols);
    for (std::size_t i = 0; i < raw.data.size(); ++i) p.data[i] = sigmoid(raw.data[i]);
    return p;
}

ExpertScoreMatrix ExpertScoreMatrix::select(std::span<const std::size_t> cols) const {
    ExpertScoreMatrix out;
    for (auto c : cols) {
        if (c >= columns.size()) throw ContractError("expert column out of range");
        out.columns.push_back(columns[c]);
    }
    out.triples = triples;
    out.raw = take_cols(raw, cols);
    return out;
}

ExpertScoreMatrix precompute_score_matrix(std::span<const ExpertPtr> experts, std::span<const LabeledTriple> triples,
                                          const LayerFeatureTable& features, unsigned threads) {
    for (const auto& e : experts) {
        if (!e) throw ContractError("null expert in registry");
        if (!e->frozen()) throw ContractError("expert '" + e->name() + "' is not frozen");
    }
    if (features.values.rows != triples.size()) throw ContractError("feature rows do not match triples");

    ExpertScoreMatrix m;
    for (const auto& e : experts) m.columns.push_back(e->name());
    m.triples.assign(triples.begin(), triples.end());
    m.raw = Matrix(triples.size(), experts.size());

    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t r = begin; r < end; ++r) {
            ExpertInput input{triples[r], features.values.row(r), features.layout};
            for (std::size_t c = 0; c < experts.size(); ++c) {
                double s = experts[c]->raw_score(input);
                if (!std::isfinite(s)) throw ContractError("expert '" + experts[c]->name() + "' produced a non-finite score");
                m.raw(r, c) = s;
            }
        }
    };
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(triples.size() / 64 + 1)));
    if (threads == 1) {
        work(0, triples.size());
        return m;
    }
    std::vector<std::exception_ptr> errors(threads);
    {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (triples.size() + threads - 1) / threads;
        for (unsigned t = 0; t < threads; ++t) {
            std::size_t begin = std::min(triples.size(), t * chunk);
            std::size_t end = std::min(triples.size(), begin + chunk);
            pool.emplace_back([&, t, begin, end] {
                try {
                    work(begin, end);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return m;
}

// ---------------------------------------------------------------------------

nlohmann::json expert_header(const Expert& expert) {
    return {{"kind", std::string(expert.kind())},
            {"name", expert.name()},
            {"config", expert.config()},
            {"parameter_count", expert.parameters().size()},
            {"digest", expert.digest()}};
}

ExpertPtr load_expert(const nlohmann::json& header, std::span<const double> parameters) {
    const auto kind = header.at("kind").get<std::string>();
    const auto name = header.at("name").get<std::string>();
    const auto& cfg = header.at("config");
    std::vector<double> p(parameters.begin(), parameters.end());
    ExpertPtr out;
    if (kind == "heuristic") {
        if (p.size() != 2) throw ContractError("heuristic expert needs 2 parameters");
        out = std::make_shared<HeuristicExpert>(name, heuristic_from_string(cfg.at("heuristic").get<std::string>()),
                                                cfg.at("alpha").get<double>(), p[0], p[1]);
    } else if (kind == "embedding") {
        out = std::make_shared<EmbeddingExpert>(name, cfg.at("nodes").get<std::size_t>(),
                                                cfg.at("layers").get<std::size_t>(), cfg.at("dim").get<std::size_t>(),
                                                std::move(p), cfg.at("training"));
    } else if (kind == "feature_mlp") {
        Mlp net(cfg.at("sizes").get<std::vector<std::size_t>>());
        if (p.size() != net.parameter_count()) throw ContractError("feature MLP parameter count mismatch");
        std::copy(p.begin(), p.end(), net.params().begin());
        FeatureScaler scaler(cfg.at("scaler_mean").get<std::vector<double>>(),
                             cfg.at("scaler_std").get<std::vector<double>>());
        out = std::make_shared<FeatureMlpExpert>(name, layout_from_json(cfg.at("layout")), std::move(scaler),
                                                 std::move(net), cfg.at("training"));
    } else {
        throw ContractError("unknown expert kind '" + kind + "'");
    }
    if (header.contains("digest") && header.at("digest").get<std::string>() != out->digest())
        throw ContractError("expert '" + name + "' parameters do not match the recorded digest");
    return out;
}

}  // namespace mole
