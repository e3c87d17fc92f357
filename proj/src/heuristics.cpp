#include "mole/heuristics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "mole/errors.hpp"

namespace mole {

std::string_view to_string(HeuristicId id) {
    switch (id) {
        case HeuristicId::CN: return "CN";
        case HeuristicId::JC: return "JC";
        case HeuristicId::AA: return "AA";
        case HeuristicId::PPR: return "PPR";
    }
    return "?";
}

HeuristicId heuristic_from_string(std::string_view name) {
    std::string s(name);
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    // Multilayer aliases: mCN, mJC, mAA, mPPR.
    if (s == "MCN" || s == "MJC" || s == "MAA" || s == "MPPR") s.erase(0, 1);
    if (s == "CN") return HeuristicId::CN;
    if (s == "JC" || s == "JACCARD") return HeuristicId::JC;
    if (s == "AA") return HeuristicId::AA;
    if (s == "PPR") return HeuristicId::PPR;
    throw DomainError("unknown heuristic '" + std::string(name) + "'");
}

std::vector<HeuristicId> normalize_heuristics(std::vector<HeuristicId> set) {
    if (set.empty()) throw DomainError("heuristic set is empty");
    std::sort(set.begin(), set.end());
    set.erase(std::unique(set.begin(), set.end()), set.end());
    return set;
}

void PprParams::validate() const {
    if (!(beta > 0.0 && beta < 1.0)) throw DomainError("PPR beta must lie in (0, 1)");
    if (!(tolerance > 0.0)) throw DomainError("PPR tolerance must be positive");
    if (max_iterations < 1) throw DomainError("PPR max_iterations must be >= 1");
}

namespace {

void check_pair(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l) {
    g.check_node(u);
    g.check_node(v);
    g.check_layer(l);
    if (u == v) throw DomainError("heuristics are undefined for u == v");
}

std::size_t intersection_size(std::span<const NodeId> a, std::span<const NodeId> b) {
    std::size_t count = 0;
    auto ia = a.begin();
    auto ib = b.begin();
    while (ia != a.end() && ib != b.end()) {
        if (*ia < *ib) ++ia;
        else if (*ib < *ia) ++ib;
        else {
            ++count;
            ++ia;
            ++ib;
        }
    }
    return count;
}

bool contains(std::span<const NodeId> row, NodeId x) { return std::binary_search(row.begin(), row.end(), x); }

double jaccard_impl(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l, NeighborMode mode, bool exclude) {
    auto nu = g.neighbors(u, l, mode);
    auto nv = g.neighbors(v, l, mode);
    std::size_t common = intersection_size(nu, nv);
    std::size_t du = nu.size();
    std::size_t dv = nv.size();
    if (exclude) {
        if (contains(nu, v)) --du;
        if (contains(nv, u)) --dv;
    }
    std::size_t uni = du + dv - common;
    return uni == 0 ? 0.0 : static_cast<double>(common) / static_cast<double>(uni);
}

double adamic_adar_impl(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l, NeighborMode mode) {
    auto nu = g.neighbors(u, l, mode);
    auto nv = g.neighbors(v, l, mode);
    double sum = 0.0;
    auto ia = nu.begin();
    auto ib = nv.begin();
    while (ia != nu.end() && ib != nv.end()) {
        if (*ia < *ib) ++ia;
        else if (*ib < *ia) ++ib;
        else {
            std::size_t d = g.neighbors(*ia, l, mode).size();
            if (d >= 2) sum += 1.0 / std::log(static_cast<double>(d));
            ++ia;
            ++ib;
        }
    }
    return sum;
}

// Power iteration for r = (1 - beta) e_s + beta P^T r. When `masked` is set
// the link between mask_a and mask_b is treated as absent.
PprResult ppr_impl(const MultilayerGraph& g, LayerIndex l, NodeId source, const PprParams& params, bool masked,
                   NodeId mask_a, NodeId mask_b) {
    const Csr& adj = g.adjacency(l);
    const std::size_t n = g.entity_count();
    const bool drop = masked && g.linked(mask_a, mask_b, l);

    std::vector<double> inv_degree(n, 0.0);
    for (NodeId x = 0; x < n; ++x) {
        std::size_t d = adj.degree(x);
        if (drop && (x == mask_a || x == mask_b)) --d;
        inv_degree[x] = d > 0 ? 1.0 / static_cast<double>(d) : 0.0;
    }

    PprResult result;
    std::vector<double> x(n, 0.0);
    std::vector<double> next(n, 0.0);
    x[source] = 1.0;
    const double beta = params.beta;
    for (std::size_t it = 0; it < params.max_iterations; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        double dangling = 0.0;
        for (NodeId y = 0; y < n; ++y) {
            double mass = x[y];
            if (mass == 0.0) continue;
            if (inv_degree[y] == 0.0) {
                dangling += mass;
                continue;
            }
            double share = beta * mass * inv_degree[y];
            for (NodeId z : adj.row(y)) {
                if (drop && ((y == mask_a && z == mask_b) || (y == mask_b && z == mask_a))) continue;
                next[z] += share;
            }
        }
        next[source] += (1.0 - beta) + beta * dangling;
        double change = 0.0;
        for (std::size_t i = 0; i < n; ++i) change += std::abs(next[i] - x[i]);
        x.swap(next);
        result.iterations = it + 1;
        if (change < params.tolerance) {
            result.converged = true;
            break;
        }
    }
    result.scores = std::move(x);
    return result;
}

}  // namespace

std::size_t common_neighbors(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l, NeighborMode mode) {
    check_pair(g, u, v, l);
    return intersection_size(g.neighbors(u, l, mode), g.neighbors(v, l, mode));
}

double jaccard(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l, NeighborMode mode) {
    check_pair(g, u, v, l);
    return jaccard_impl(g, u, v, l, mode, false);
}

double adamic_adar(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l, NeighborMode mode) {
    check_pair(g, u, v, l);
    return adamic_adar_impl(g, u, v, l, mode);
}

PprResult ppr_vector(const MultilayerGraph& g, LayerIndex l, NodeId source, const PprParams& params) {
    g.check_node(source);
    g.check_layer(l);
    params.validate();
    return ppr_impl(g, l, source, params, false, 0, 0);
}

double ppr_pair(const MultilayerGraph& g, NodeId u, NodeId v, LayerIndex l, const PprParams& params) {
    check_pair(g, u, v, l);
    params.validate();
    auto ru = ppr_impl(g, l, u, params, false, 0, 0);
    auto rv = ppr_impl(g, l, v, params, false, 0, 0);
    return (ru.scores[v] + rv.scores[u]) / 2.0;
}

double multilayer_score(std::span<const double> per_layer, LayerIndex target, double alpha, bool allow_reduction) {
    if (per_layer.size() < 2) throw DomainError("multilayer score needs at least 2 layers");
    if (target >= per_layer.size()) throw DomainError("target layer out of range");
    const bool reduction = allow_reduction && alpha == 1.0;
    if (!reduction && !(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
    for (double s : per_layer)
        if (!std::isfinite(s)) throw DomainError("non-finite per-layer score");
    if (reduction) return per_layer[target];
    double others = 0.0;
    for (std::size_t l = 0; l < per_layer.size(); ++l)
        if (l != target) others += per_layer[l];
    others /= static_cast<double>(per_layer.size() - 1);
    return alpha * per_layer[target] + (1.0 - alpha) * others;
}

// ---------------------------------------------------------------------------

HeuristicEngine::HeuristicEngine(const MultilayerGraph& g, HeuristicOptions options)
    : graph_(g), options_(options), masked_pairs_(g.layer_count()) {
    options_.ppr.validate();
}

std::shared_ptr<const std::vector<double>> HeuristicEngine::ppr(NodeId source, LayerIndex l) const {
    graph_.check_node(source);
    graph_.check_layer(l);
    const std::uint64_t key = (static_cast<std::uint64_t>(source) << 32) | l;
    {
        std::shared_lock lock(mutex_);
        auto it = vectors_.find(key);
        if (it != vectors_.end()) return it->second;
    }
    auto result = ppr_impl(graph_, l, source, options_.ppr, false, 0, 0);
    auto vec = std::make_shared<const std::vector<double>>(std::move(result.scores));
    std::unique_lock lock(mutex_);
    auto [it, inserted] = vectors_.emplace(key, vec);
    if (inserted && !result.converged) ++unconverged_;
    return it->second;
}

double HeuristicEngine::ppr_score(NodeId u, NodeId v, LayerIndex l, bool exclude_pair) const {
    if (!exclude_pair || !graph_.linked(u, v, l)) {
        auto ru = ppr(u, l);
        auto rv = ppr(v, l);
        return ((*ru)[v] + (*rv)[u]) / 2.0;
    }
    const std::uint64_t key = NodePair::of(u, v).key();
    auto& memo = masked_pairs_[l];
    {
        std::shared_lock lock(mutex_);
        auto it = memo.find(key);
        if (it != memo.end()) return it->second;
    }
    auto ru = ppr_impl(graph_, l, u, options_.ppr, true, u, v);
    auto rv = ppr_impl(graph_, l, v, options_.ppr, true, u, v);
    double value = (ru.scores[v] + rv.scores[u]) / 2.0;
    std::unique_lock lock(mutex_);
    auto [it, inserted] = memo.emplace(key, value);
    if (inserted) unconverged_ += static_cast<std::size_t>(!ru.converged) + static_cast<std::size_t>(!rv.converged);
    return it->second;
}

double HeuristicEngine::score(HeuristicId h, NodeId u, NodeId v, LayerIndex l, bool exclude_pair) const {
    check_pair(graph_, u, v, l);
    switch (h) {
        case HeuristicId::CN:
            // A direct u-v link never enters the intersection.
            return static_cast<double>(
                intersection_size(graph_.neighbors(u, l, options_.mode), graph_.neighbors(v, l, options_.mode)));
        case HeuristicId::JC: return jaccard_impl(graph_, u, v, l, options_.mode, exclude_pair);
        case HeuristicId::AA: return adamic_adar_impl(graph_, u, v, l, options_.mode);
        case HeuristicId::PPR: return ppr_score(u, v, l, exclude_pair);
    }
    return 0.0;
}

std::size_t HeuristicEngine::cached_vectors() const {
    std::shared_lock lock(mutex_);
    return vectors_.size();
}

std::size_t HeuristicEngine::unconverged_vectors() const {
    std::shared_lock lock(mutex_);
    return unconverged_;
}

// ---------------------------------------------------------------------------

LayerFeatureTable extract_layer_features(const HeuristicEngine& engine, std::span<const LabeledTriple> triples,
                                         std::vector<HeuristicId> heuristics, bool exclude_pair, unsigned threads) {
    LayerFeatureTable table;
    table.layout.heuristics = normalize_heuristics(std::move(heuristics));
    table.layout.layers = engine.graph().layer_count();
    table.values = Matrix(triples.size(), table.layout.width());

    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t r = begin; r < end; ++r) {
            const auto& t = triples[r];
            auto row = table.values.row(r);
            for (std::size_t h = 0; h < table.layout.heuristics.size(); ++h)
                for (LayerIndex l = 0; l < table.layout.layers; ++l)
                    row[table.layout.column(h, l)] =
                        engine.score(table.layout.heuristics[h], t.u, t.v, l, exclude_pair);
        }
    };

    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(triples.size() / 64 + 1)));
    if (threads == 1) {
        work(0, triples.size());
        return table;
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
    return table;
}

Matrix aggregate_features(const LayerFeatureTable& table, std::span<const LabeledTriple> triples, double alpha) {
    if (triples.size() != table.values.rows) throw ContractError("triple count does not match feature rows");
    const auto& layout = table.layout;
    Matrix out(triples.size(), layout.heuristics.size());
    std::vector<double> per_layer(layout.layers);
    for (std::size_t r = 0; r < triples.size(); ++r) {
        auto row = table.values.row(r);
        for (std::size_t h = 0; h < layout.heuristics.size(); ++h) {
            for (LayerIndex l = 0; l < layout.layers; ++l) per_layer[l] = row[layout.column(h, l)];
            out(r, h) = multilayer_score(per_layer, triples[r].layer, alpha);
        }
    }
    return out;
}

LayerFeatureTable select_heuristics(const LayerFeatureTable& table, std::vector<HeuristicId> heuristics) {
    heuristics = normalize_heuristics(std::move(heuristics));
    std::vector<std::size_t> cols;
    for (auto h : heuristics) {
        auto it = std::find(table.layout.heuristics.begin(), table.layout.heuristics.end(), h);
        if (it == table.layout.heuristics.end())
            throw ContractError("heuristic " + std::string(to_string(h)) + " not in feature table");
        auto pos = static_cast<std::size_t>(it - table.layout.heuristics.begin());
        for (LayerIndex l = 0; l < table.layout.layers; ++l) cols.push_back(table.layout.column(pos, l));
    }
    LayerFeatureTable out;
    out.layout = {heuristics, table.layout.layers};
    out.values = take_cols(table.values, cols);
    return out;
}

HeuristicFeatureVector heuristic_features(const MultilayerGraph& g, const LabeledTriple& triple,
                                          std::vector<HeuristicId> heuristics, double alpha,
                                          const HeuristicOptions& options) {
    HeuristicEngine engine(g, options);
    std::span<const LabeledTriple> one(&triple, 1);
    auto table = extract_layer_features(engine, one, std::move(heuristics));
    auto agg = aggregate_features(table, one, alpha);
    return {triple, table.layout.heuristics, std::vector<double>(agg.data.begin(), agg.data.end())};
}

// ---------------------------------------------------------------------------

FeatureScaler::FeatureScaler(std::vector<double> mean, std::vector<double> stdev)
    : mean_(std::move(mean)), stdev_(std::move(stdev)) {
    if (mean_.size() != stdev_.size()) throw ContractError("scaler mean/std size mismatch");
    for (double s : stdev_)
        if (!(s > 0.0)) throw ContractError("scaler std components must be positive");
}

FeatureScaler FeatureScaler::fit(const Matrix& rows) {
    if (rows.rows < 2) throw DomainError("fitting a scaler needs at least 2 training rows");
    const double n = static_cast<double>(rows.rows);
    std::vector<double> mean(rows.cols, 0.0);
    std::vector<double> var(rows.cols, 0.0);
    for (std::size_t r = 0; r < rows.rows; ++r)
        for (std::size_t c = 0; c < rows.cols; ++c) mean[c] += rows(r, c);
    for (auto& m : mean) m /= n;
    for (std::size_t r = 0; r < rows.rows; ++r)
        for (std::size_t c = 0; c < rows.cols; ++c) {
            double d = rows(r, c) - mean[c];
            var[c] += d * d;
        }
    std::vector<double> stdev(rows.cols);
    for (std::size_t c = 0; c < rows.cols; ++c) {
        double s = std::sqrt(var[c] / n);
        stdev[c] = s < 1e-12 ? 1.0 : s;
    }
    return FeatureScaler(std::move(mean), std::move(stdev));
}

std::vector<double> FeatureScaler::apply(std::span<const double> row) const {
    if (row.size() != mean_.size()) throw ContractError("feature width does not match scaler");
    std::vector<double> out(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) out[c] = (row[c] - mean_[c]) / stdev_[c];
    return out;
}

Matrix FeatureScaler::apply(const Matrix& rows) const {
    if (rows.cols != mean_.size()) throw ContractError("feature width does not match scaler");
    Matrix out(rows.rows, rows.cols);
    for (std::size_t r = 0; r < rows.rows; ++r)
        for (std::size_t c = 0; c < rows.cols; ++c) out(r, c) = (rows(r, c) - mean_[c]) / stdev_[c];
    return out;
}

}  // namespace mole
