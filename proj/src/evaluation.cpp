#include "mole/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "mole/errors.hpp"
#include "mole/random.hpp"
#include "mole/util.hpp"

namespace mole {

std::string_view to_string(SplitRole role) {
    switch (role) {
        case SplitRole::Train: return "train";
        case SplitRole::Validation: return "val";
        case SplitRole::Test: return "test";
    }
    return "?";
}

// ----------------------------------------------------------------- splits

int FoldAssignment::fold(NodePair p) const {
    auto it = std::lower_bound(pairs.begin(), pairs.end(), p);
    if (it == pairs.end() || *it != p) return -1;
    return fold_of[static_cast<std::size_t>(it - pairs.begin())];
}

std::vector<NodePair> FoldAssignment::pairs_in(int f) const {
    std::vector<NodePair> out;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        if (fold_of[i] == f) out.push_back(pairs[i]);
    return out;
}

TripleList FoldAssignment::project(const MultilayerGraph& g, int f) const {
    TripleList out;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (fold_of[i] != f) continue;
        for (LayerIndex l = 0; l < g.layer_count(); ++l)
            if (g.linked(pairs[i].first, pairs[i].second, l))
                out.push_back({pairs[i].first, pairs[i].second, l, 1, f});
    }
    return out;
}

FoldAssignment kfold_pair_split(const MultilayerGraph& g, std::size_t folds, std::uint64_t seed) {
    if (folds < 3) throw DomainError("need at least 3 folds for disjoint train/validation/test roles");
    auto linked = g.linked_pairs();
    if (linked.size() < folds)
        throw DomainError("only " + std::to_string(linked.size()) + " linked pairs for " + std::to_string(folds) +
                          " folds");
    std::vector<std::size_t> order(linked.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, {0xf01dULL}));
    rng.shuffle(std::span<std::size_t>(order));

    FoldAssignment out;
    out.folds = folds;
    out.pairs = std::move(linked);
    out.fold_of.assign(out.pairs.size(), -1);
    for (std::size_t i = 0; i < order.size(); ++i) out.fold_of[order[i]] = static_cast<int>(i % folds);
    return out;
}

NegativeStrategy negative_strategy_from_string(std::string_view s) {
    if (s == "uniform") return NegativeStrategy::Uniform;
    if (s == "degree_matched" || s == "degree-matched") return NegativeStrategy::DegreeMatched;
    throw DomainError("unknown negative sampling strategy '" + std::string(s) + "'");
}

std::string_view to_string(NegativeStrategy s) {
    return s == NegativeStrategy::Uniform ? "uniform" : "degree_matched";
}

TripleList sample_negatives(const MultilayerGraph& g, LayerIndex l, std::size_t count, NegativeStrategy strategy,
                            const PairSet& exclusion, std::uint64_t seed) {
    g.check_layer(l);
    TripleList out;
    if (count == 0) return out;

    const auto nodes = g.layer_nodes(l);
    std::vector<double> cumulative;
    if (strategy == NegativeStrategy::DegreeMatched) {
        cumulative.reserve(nodes.size());
        double total = 0.0;
        for (NodeId u : nodes) cumulative.push_back(total += static_cast<double>(g.degree(u, l)));
        if (total == 0.0) throw SamplingError("layer has no edges to match degrees against", count);
    }
    if (nodes.size() < 2) throw SamplingError("layer has fewer than two nodes", count);

    Rng rng(seed);
    auto draw = [&]() -> NodeId {
        if (strategy == NegativeStrategy::Uniform) return nodes[rng.index(nodes.size())];
        const double x = rng.uniform() * cumulative.back();
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), x);
        if (it == cumulative.end()) --it;
        return nodes[static_cast<std::size_t>(it - cumulative.begin())];
    };

    PairSet taken;
    const std::size_t budget = 50 * count;
    for (std::size_t attempt = 0; attempt < budget && out.size() < count; ++attempt) {
        const NodeId a = draw();
        const NodeId b = draw();
        if (a == b) continue;
        const auto p = NodePair::of(a, b);
        if (g.linked(a, b, l) || exclusion.count(p.key()) || !taken.insert(p.key()).second) continue;
        out.push_back({p.first, p.second, l, 0, -1});
    }
    if (out.size() < count)
        throw SamplingError("drew " + std::to_string(out.size()) + " of " + std::to_string(count) +
                                " negatives in layer " + std::to_string(g.layer_id(l)),
                            count - out.size());
    return out;
}

const TripleList& RoundSplit::of(SplitRole role) const {
    switch (role) {
        case SplitRole::Train: return train;
        case SplitRole::Validation: return validation;
        case SplitRole::Test: return test;
    }
    return train;
}

RoundSplit build_round(const MultilayerGraph& g, const FoldAssignment& folds, std::size_t round,
                       NegativeStrategy strategy, std::uint64_t seed) {
    if (folds.folds < 3) throw DomainError("fold assignment is empty");
    RoundSplit split;
    split.round = round;
    split.test_fold = folds.test_fold(round);
    split.validation_fold = folds.validation_fold(round);

    auto role_of = [&](int f) {
        if (f == split.test_fold) return SplitRole::Test;
        if (f == split.validation_fold) return SplitRole::Validation;
        return SplitRole::Train;
    };
    auto list_for = [&](SplitRole r) -> TripleList& {
        return r == SplitRole::Train ? split.train : r == SplitRole::Validation ? split.validation : split.test;
    };

    for (std::size_t i = 0; i < folds.pairs.size(); ++i) {
        const int f = folds.fold_of[i];
        const SplitRole role = role_of(f);
        const NodePair p = folds.pairs[i];
        if (role != SplitRole::Train) split.held_out.push_back(p);
        for (LayerIndex l = 0; l < g.layer_count(); ++l)
            if (g.linked(p.first, p.second, l)) list_for(role).push_back({p.first, p.second, l, 1, f});
    }

    // Test first, then validation, then train; each split's negatives are
    // excluded from the later splits of the same layer.
    const SplitRole order[] = {SplitRole::Test, SplitRole::Validation, SplitRole::Train};
    for (LayerIndex l = 0; l < g.layer_count(); ++l) {
        PairSet used;
        for (SplitRole role : order) {
            auto& list = list_for(role);
            const auto positives = static_cast<std::size_t>(std::count_if(
                list.begin(), list.end(), [&](const LabeledTriple& t) { return t.label == 1 && t.layer == l; }));
            const auto s = derive_seed(seed, {0x4e6ULL, round, static_cast<std::uint64_t>(role), l});
            auto negs = sample_negatives(g, l, positives, strategy, used, s);
            const int tag = role == SplitRole::Test         ? split.test_fold
                            : role == SplitRole::Validation ? split.validation_fold
                                                            : -1;
            for (auto& t : negs) {
                t.fold = tag;
                used.insert(t.pair().key());
            }
            list.insert(list.end(), negs.begin(), negs.end());
        }
    }
    return split;
}

// ---------------------------------------------------------------- metrics

std::size_t rank_of_positive(double positive, std::span<const double> negatives) {
    if (negatives.empty()) throw ContractError("positive has no negatives to be ranked against");
    if (!std::isfinite(positive)) throw ContractError("non-finite positive score");
    std::size_t above = 0;
    for (double s : negatives) {
        if (!std::isfinite(s)) throw ContractError("non-finite negative score");
        if (s >= positive) ++above;
    }
    return 1 + above;
}

double MetricRow::hits_at(std::size_t k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
        if (ks[i] == k) return hits[i];
    throw DomainError("Hits@" + std::to_string(k) + " was not computed");
}

QuerySet make_query_set(std::span<const LabeledTriple> triples, std::span<const double> scores) {
    if (triples.size() != scores.size()) throw ContractError("triples and scores differ in length");
    std::map<LayerIndex, LayerQueries> by_layer;
    for (std::size_t i = 0; i < triples.size(); ++i) {
        auto& q = by_layer[triples[i].layer];
        q.layer = triples[i].layer;
        (triples[i].label ? q.positives : q.negatives).push_back(scores[i]);
    }
    QuerySet out;
    for (auto& [l, q] : by_layer)
        if (!q.positives.empty()) out.layers.push_back(std::move(q));
    return out;
}

namespace {

struct RankAccumulator {
    std::size_t queries = 0;
    double reciprocal = 0.0;
    std::vector<std::size_t> hit_counts;

    explicit RankAccumulator(std::size_t ks) : hit_counts(ks, 0) {}

    void add(std::size_t rank, std::span<const std::size_t> ks) {
        ++queries;
        reciprocal += 1.0 / static_cast<double>(rank);
        for (std::size_t i = 0; i < ks.size(); ++i)
            if (rank <= ks[i]) ++hit_counts[i];
    }

    MetricRow row(std::span<const std::size_t> ks) const {
        MetricRow r;
        r.queries = queries;
        r.ks.assign(ks.begin(), ks.end());
        r.mrr = reciprocal / static_cast<double>(queries);
        for (auto c : hit_counts) r.hits.push_back(static_cast<double>(c) / static_cast<double>(queries));
        return r;
    }
};

}  // namespace

MetricReport compute_metrics(const QuerySet& queries, std::span<const std::size_t> ks) {
    RankAccumulator pooled(ks.size());
    MetricReport report;
    for (const auto& layer : queries.layers) {
        if (layer.negatives.empty()) throw ContractError("layer has positives but no negatives");
        for (double s : layer.negatives)
            if (!std::isfinite(s)) throw ContractError("non-finite negative score");
        std::vector<double> sorted = layer.negatives;
        std::sort(sorted.begin(), sorted.end());
        RankAccumulator acc(ks.size());
        for (double p : layer.positives) {
            if (!std::isfinite(p)) throw ContractError("non-finite positive score");
            const auto below = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), p) - sorted.begin());
            const std::size_t rank = 1 + (sorted.size() - below);
            acc.add(rank, ks);
            pooled.add(rank, ks);
        }
        if (acc.queries > 0) report.per_layer.emplace_back(layer.layer, acc.row(ks));
    }
    if (pooled.queries == 0) throw DomainError("empty query set");
    report.pooled = pooled.row(ks);
    return report;
}

std::vector<ModelSummary> summarize(std::span<const ResultRow> rows) {
    std::vector<ModelSummary> out;
    std::vector<std::vector<const MetricRow*>> members;
    for (const auto& r : rows) {
        if (r.layer != "all") continue;
        auto it = std::find_if(out.begin(), out.end(), [&](const ModelSummary& s) { return s.model == r.model; });
        if (it == out.end()) {
            out.push_back({});
            out.back().model = r.model;
            members.emplace_back();
            it = out.end() - 1;
        }
        auto& s = *it;
        ++s.folds;
        if (r.out_of_time) {
            ++s.out_of_time;
            continue;
        }
        members[static_cast<std::size_t>(it - out.begin())].push_back(&r.metrics);
    }
    auto mean_std = [](const std::vector<double>& xs, double& mean, double& sd) {
        mean = sd = 0.0;
        if (xs.empty()) return;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        for (double x : xs) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / static_cast<double>(xs.size()));
    };
    for (std::size_t m = 0; m < out.size(); ++m) {
        auto& s = out[m];
        const auto& rs = members[m];
        if (rs.empty()) continue;
        std::vector<double> xs;
        for (auto* r : rs) xs.push_back(r->mrr);
        mean_std(xs, s.mrr_mean, s.mrr_std);
        s.ks = rs.front()->ks;
        s.hits_mean.resize(s.ks.size());
        s.hits_std.resize(s.ks.size());
        for (std::size_t k = 0; k < s.ks.size(); ++k) {
            xs.clear();
            for (auto* r : rs) xs.push_back(r->hits.at(k));
            mean_std(xs, s.hits_mean[k], s.hits_std[k]);
        }
    }
    return out;
}

// -------------------------------------------------------------- ensembles

double ens_s_predict(std::span<const double> probabilities) {
    if (probabilities.empty()) throw ContractError("mean ensemble needs at least one expert");
    double s = 0.0;
    for (double p : probabilities) s += p;
    return s / static_cast<double>(probabilities.size());
}

double ens_w_predict(std::span<const double> weights, std::span<const double> probabilities) {
    if (weights.size() != probabilities.size()) throw ContractError("weights and probabilities differ in length");
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * probabilities[i];
    return sigmoid(s);
}

EnsWModel train_ens_w(const Matrix& train_probabilities, std::span<const int> train_labels,
                      const Matrix& validation_probabilities, std::span<const int> validation_labels,
                      const EnsWConfig& config) {
    if (train_probabilities.rows != train_labels.size() || validation_probabilities.rows != validation_labels.size())
        throw ContractError("ensemble inputs are not row-aligned");
    if (train_probabilities.cols != validation_probabilities.cols || train_probabilities.cols == 0)
        throw ContractError("ensemble inputs have inconsistent expert counts");
    if (validation_labels.empty()) throw DomainError("validation split is empty");
    if (config.batch_size < 1) throw DomainError("batch size must be >= 1");

    const std::size_t n = train_probabilities.cols;
    EnsWModel model;
    model.weights.assign(n, 0.0);
    AdamMoments moments(n);
    std::size_t steps = 0;
    const std::vector<char> mask(n, 1);

    EarlyStopping options;
    options.batch_size = config.batch_size;
    options.patience = config.patience;
    options.max_epochs = config.max_epochs;
    options.seed = config.seed;
    options.adam.learning_rate = config.learning_rate;
    options.adam.weight_decay = config.weight_decay;

    auto point_loss = [](double y_hat, int y) {
        const double p = std::clamp(y_hat, 1e-12, 1.0 - 1e-12);
        return y ? -std::log(p) : -std::log(1.0 - p);
    };
    auto batch_grad = [&](std::span<const std::size_t> rows, std::span<double> grad) {
        double loss = 0.0;
        for (std::size_t r : rows) {
            auto p = train_probabilities.row(r);
            const double y_hat = ens_w_predict(model.weights, p);
            const double d = y_hat - train_labels[r];
            for (std::size_t i = 0; i < n; ++i) grad[i] += d * p[i];
            loss += point_loss(y_hat, train_labels[r]);
        }
        return loss;
    };
    auto val_loss = [&] {
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < validation_labels.size(); start += config.batch_size) {
            const std::size_t end = std::min(validation_labels.size(), start + config.batch_size);
            for (std::size_t r = start; r < end; ++r)
                total += point_loss(ens_w_predict(model.weights, validation_probabilities.row(r)), validation_labels[r]);
            ++batches;
        }
        return total / static_cast<double>(batches);
    };
    model.history = fit_with_early_stopping(model.weights, moments, steps, mask, train_labels.size(), options,
                                            batch_grad, val_loss);
    return model;
}

// --------------------------------------------------------------- analyses

UniqueCorrect unique_correct_fractions(const Matrix& probabilities, std::span<const int> labels) {
    if (probabilities.rows != labels.size()) throw ContractError("probabilities and labels are not row-aligned");
    if (probabilities.cols < 2) throw DomainError("unique-correct fractions need at least 2 experts");
    const std::size_t n = probabilities.cols;
    UniqueCorrect out;
    out.correct.assign(n, 0);
    out.unique.assign(n, 0);
    std::vector<char> ok(n);
    for (std::size_t r = 0; r < probabilities.rows; ++r) {
        std::size_t total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ok[i] = (probabilities(r, i) >= 0.5) == (labels[r] == 1);
            total += ok[i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!ok[i]) continue;
            ++out.correct[i];
            if (total == 1) ++out.unique[i];
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.of_own_correct.push_back(out.correct[i] ? static_cast<double>(out.unique[i]) / out.correct[i] : 0.0);
        out.of_all.push_back(labels.empty() ? 0.0 : static_cast<double>(out.unique[i]) / labels.size());
    }
    return out;
}

GatingReport gating_weight_report(const Matrix& weights, const Matrix& heuristic_scores,
                                  std::span<const HeuristicId> heuristics, std::size_t quantiles) {
    if (weights.rows != heuristic_scores.rows) throw ContractError("weights and scores are not row-aligned");
    if (heuristic_scores.cols != heuristics.size()) throw ContractError("one score column per heuristic expected");
    if (quantiles < 1) throw DomainError("quantile count must be >= 1");
    if (weights.rows < 4 * quantiles)
        throw DomainError("need at least " + std::to_string(4 * quantiles) + " triples for " +
                          std::to_string(quantiles) + " quantiles");
    const std::size_t rows = weights.rows;
    const std::size_t n = weights.cols;

    GatingReport report;
    report.mean.assign(n, 0.0);
    report.stdev.assign(n, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < n; ++i) report.mean[i] += weights(r, i);
    for (auto& m : report.mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < n; ++i) report.stdev[i] += std::pow(weights(r, i) - report.mean[i], 2);
    for (auto& s : report.stdev) s = std::sqrt(s / static_cast<double>(rows));

    std::vector<std::size_t> order(rows);
    for (std::size_t h = 0; h < heuristics.size(); ++h) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return heuristic_scores(a, h) < heuristic_scores(b, h); });
        for (std::size_t b = 0; b < quantiles; ++b) {
            const std::size_t lo = b * rows / quantiles;
            const std::size_t hi = (b + 1) * rows / quantiles;
            QuantileRow row;
            row.heuristic = heuristics[h];
            row.bin = b;
            row.count = hi - lo;
            row.share = static_cast<double>(row.count) / static_cast<double>(rows);
            row.low = heuristic_scores(order[lo], h);
            row.high = heuristic_scores(order[hi - 1], h);
            row.mean_weight.assign(n, 0.0);
            for (std::size_t j = lo; j < hi; ++j)
                for (std::size_t i = 0; i < n; ++i) row.mean_weight[i] += weights(order[j], i);
            for (auto& w : row.mean_weight) w /= static_cast<double>(row.count);
            report.quantiles.push_back(std::move(row));
        }
    }
    return report;
}

GatingReport gating_weight_report(const GaterModel& model, const Matrix& raw_features,
                                  std::span<const HeuristicId> heuristics, std::size_t quantiles) {
    Matrix weights(raw_features.rows, model.net.output_dim());
    for (std::size_t r = 0; r < raw_features.rows; ++r) {
        auto x = model.scaler.apply(raw_features.row(r));
        auto w = gate_forward(model, x, model.config.routing);
        std::copy(w.begin(), w.end(), weights.row(r).begin());
    }
    return gating_weight_report(weights, raw_features, heuristics, quantiles);
}

}  // namespace mole
