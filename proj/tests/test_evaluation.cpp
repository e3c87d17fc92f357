#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "mole/errors.hpp"
#include "mole/evaluation.hpp"
#include "oracles.hpp"
#include "tasks.hpp"

using namespace mole;

namespace {

/// `pairs` disjoint edges in layer 1, plus one edge in layer 2.
MultilayerGraph matching(std::size_t pairs) {
    GraphBuilder b(false);
    for (std::size_t i = 0; i < pairs; ++i)
        b.add_edge(1, "a" + std::to_string(i), "b" + std::to_string(i));
    b.add_edge(2, "a0", "b0");
    return std::move(b).build();
}

QuerySet one_layer(std::vector<double> pos, std::vector<double> neg) {
    return {{LayerQueries{0, std::move(pos), std::move(neg)}}};
}

}  // namespace

TEST_CASE("fold assignment partitions linked pairs") {
    auto g = matching(20);
    auto f = kfold_pair_split(g, 10, 3);
    CHECK(f.pairs == g.linked_pairs());
    std::map<int, int> sizes;
    for (int fold : f.fold_of) ++sizes[fold];
    CHECK(sizes.size() == 10);
    for (auto [fold, n] : sizes) CHECK(n == 2);
    std::size_t total = 0;
    for (int i = 0; i < 10; ++i) total += f.pairs_in(i).size();
    CHECK(total == 20);

    auto again = kfold_pair_split(g, 10, 3);
    CHECK(again.fold_of == f.fold_of);
    CHECK(kfold_pair_split(g, 10, 4).fold_of != f.fold_of);

    CHECK(f.test_fold(3) == 3);
    CHECK(f.validation_fold(3) == 4);
    CHECK(f.validation_fold(9) == 0);

    CHECK_THROWS_AS(kfold_pair_split(g, 2, 1), DomainError);
    CHECK_THROWS_AS(kfold_pair_split(matching(5), 10, 1), DomainError);
}

TEST_CASE("layer projection puts a pair's triples in its fold only") {
    auto g = parse_edgelist("1 u v\n3 u v\n2 x y\n1 x z\n2 y z\n3 p q\n1 r s").graph;
    auto f = kfold_pair_split(g, 3, 1);
    NodePair uv = NodePair::of(*g.find_entity("u"), *g.find_entity("v"));
    int home = f.fold(uv);
    for (int fold = 0; fold < 3; ++fold) {
        std::set<LayerIndex> layers;
        for (const auto& t : f.project(g, fold))
            if (t.pair() == uv) layers.insert(t.layer);
        if (fold == home)
            CHECK(layers == std::set<LayerIndex>{*g.find_layer(1), *g.find_layer(3)});
        else
            CHECK(layers.empty());
    }
}

TEST_CASE("negative sampling: the only candidate") {
    GraphBuilder b(false);
    for (int i = 0; i < 5; ++i)
        for (int j = i + 1; j < 5; ++j)
            if (!(i == 1 && j == 3)) b.add_edge(1, std::to_string(i), std::to_string(j));
    b.add_edge(2, "0", "1");
    auto g = std::move(b).build();
    for (auto s : {NegativeStrategy::Uniform, NegativeStrategy::DegreeMatched}) {
        auto neg = sample_negatives(g, 0, 1, s, {}, 7);
        REQUIRE(neg.size() == 1);
        CHECK(neg[0].pair() == NodePair::of(*g.find_entity("1"), *g.find_entity("3")));
        CHECK(neg[0].label == 0);
        try {
            sample_negatives(g, 0, 2, s, {}, 7);
            FAIL("expected a sampling error");
        } catch (const SamplingError& e) {
            CHECK(e.shortfall() == 1);
        }
    }
}

TEST_CASE("negative sampling respects exclusions and determinism") {
    auto g = generate_ws_multiplex({50, 2, 4, 0.1, 2});
    PairSet excl;
    auto first = sample_negatives(g, 0, 30, NegativeStrategy::Uniform, excl, 11);
    CHECK(first == sample_negatives(g, 0, 30, NegativeStrategy::Uniform, excl, 11));
    for (const auto& t : first) excl.insert(t.pair().key());
    auto second = sample_negatives(g, 0, 30, NegativeStrategy::Uniform, excl, 11);
    std::set<std::uint64_t> seen;
    for (const auto& t : second) {
        CHECK_FALSE(excl.count(t.pair().key()));
        CHECK_FALSE(g.linked(t.u, t.v, 0));
        CHECK(t.u != t.v);
        CHECK(seen.insert(t.pair().key()).second);
    }
}

TEST_CASE("degree-matched sampling favors high-degree endpoints") {
    // A 10-leaf star plus a disjoint matching, so the hub has non-neighbors.
    GraphBuilder b(false);
    for (int i = 1; i <= 10; ++i) b.add_edge(1, "hub", "leaf" + std::to_string(i));
    for (int i = 0; i < 10; ++i) b.add_edge(1, "m" + std::to_string(2 * i), "m" + std::to_string(2 * i + 1));
    b.add_edge(2, "hub", "m0");
    auto g = std::move(b).build();
    const NodeId hub = *g.find_entity("hub");
    std::map<NodeId, std::size_t> freq, uniform_freq;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        for (const auto& t : sample_negatives(g, 0, 10, NegativeStrategy::DegreeMatched, {}, seed)) {
            ++freq[t.u];
            ++freq[t.v];
        }
        for (const auto& t : sample_negatives(g, 0, 10, NegativeStrategy::Uniform, {}, seed)) {
            ++uniform_freq[t.u];
            ++uniform_freq[t.v];
        }
    }
    for (int i = 1; i <= 10; ++i) CHECK(freq[hub] > freq[*g.find_entity("leaf" + std::to_string(i))]);
    CHECK(freq[hub] > uniform_freq[hub]);
}

TEST_CASE("round splits keep roles and negatives apart") {
    auto g = generate_ws_multiplex({80, 3, 4, 0.2, 4});
    auto f = kfold_pair_split(g, 5, 9);
    auto split = build_round(g, f, 2, NegativeStrategy::Uniform, 5);
    CHECK(split.test_fold == 2);
    CHECK(split.validation_fold == 3);

    std::map<std::tuple<NodeId, NodeId, LayerIndex>, int> owner;
    for (auto role : {SplitRole::Train, SplitRole::Validation, SplitRole::Test}) {
        std::map<LayerIndex, std::pair<std::size_t, std::size_t>> counts;
        for (const auto& t : split.of(role)) {
            auto p = t.pair();
            CHECK(owner.emplace(std::tuple{p.first, p.second, t.layer}, static_cast<int>(role)).second);
            if (t.label) {
                ++counts[t.layer].first;
                CHECK(g.linked(t.u, t.v, t.layer));
            } else {
                ++counts[t.layer].second;
                CHECK_FALSE(g.linked(t.u, t.v, t.layer));
            }
        }
        for (auto [l, c] : counts) CHECK(c.first == c.second);
    }
    for (const auto& t : split.test) CHECK((t.label == 0 || f.fold(t.pair()) == 2));
    CHECK(split.held_out.size() == f.pairs_in(2).size() + f.pairs_in(3).size());
    CHECK(build_round(g, f, 2, NegativeStrategy::Uniform, 5).test == split.test);
}

TEST_CASE("rank of a positive") {
    CHECK(rank_of_positive(0.9, std::vector<double>{0.1, 0.5}) == 1);
    CHECK(rank_of_positive(0.5, std::vector<double>{0.5, 0.1}) == 2);
    CHECK(rank_of_positive(0.0, std::vector<double>{0.1, 0.2, 0.3}) == 4);
    CHECK_THROWS_AS(rank_of_positive(NAN, std::vector<double>{0.1}), ContractError);
    CHECK_THROWS_AS(rank_of_positive(0.1, std::vector<double>{INFINITY}), ContractError);
}

TEST_CASE("metrics from ranks") {
    // Positives that rank 1, 2 and 4 against three negatives.
    auto q = one_layer({0.9, 0.65, 0.1}, {0.7, 0.6, 0.5});
    std::vector<std::size_t> ks{1, 2, 5};
    auto m = compute_metrics(q, ks).pooled;
    CHECK(m.queries == 3);
    CHECK(m.mrr == doctest::Approx((1 + 0.5 + 0.25) / 3));
    CHECK(m.mrr == doctest::Approx(0.5833).epsilon(1e-4));
    CHECK(m.hits_at(2) == doctest::Approx(2.0 / 3));

    auto perfect = compute_metrics(one_layer({5, 6}, {1, 2})).pooled;
    CHECK(perfect.mrr == 1.0);
    for (double h : perfect.hits) CHECK(h == 1.0);

    CHECK_THROWS_AS(compute_metrics(QuerySet{}), DomainError);
    CHECK_THROWS_AS(compute_metrics(one_layer({1.0}, {})), ContractError);
}

TEST_CASE("metrics pool across layers and keep a per-layer breakdown") {
    TripleList triples{{0, 1, 0, 1, 0}, {0, 2, 0, 0, -1}, {1, 2, 1, 1, 0}, {2, 3, 1, 0, -1}};
    std::vector<double> scores{0.2, 0.9, 0.8, 0.1};
    auto r = compute_metrics(make_query_set(triples, scores));
    CHECK(r.pooled.mrr == doctest::Approx(0.75));
    REQUIRE(r.per_layer.size() == 2);
    CHECK(r.per_layer[0].second.mrr == 0.5);
    CHECK(r.per_layer[1].second.mrr == 1.0);
}

TEST_CASE("metrics agree with a sort-based oracle and are rank invariant") {
    std::mt19937_64 rng(31);
    for (int t = 0; t < 200; ++t) {
        QuerySet q;
        std::size_t layers = 1 + rng() % 3;
        std::vector<std::size_t> ranks;
        for (std::size_t l = 0; l < layers; ++l) {
            LayerQueries lq{static_cast<LayerIndex>(l), {}, {}};
            std::size_t np = 1 + rng() % 20, nn = 1 + rng() % 20;
            for (std::size_t i = 0; i < np; ++i) lq.positives.push_back(static_cast<double>(rng() % 10));
            for (std::size_t i = 0; i < nn; ++i) lq.negatives.push_back(static_cast<double>(rng() % 10));
            for (double p : lq.positives) ranks.push_back(oracle::rank_by_sort(p, lq.negatives));
            q.layers.push_back(std::move(lq));
        }
        auto m = compute_metrics(q).pooled;
        double mrr = 0;
        for (auto r : ranks) mrr += 1.0 / static_cast<double>(r);
        CHECK(m.mrr == doctest::Approx(mrr / static_cast<double>(ranks.size())).epsilon(1e-14));
        for (std::size_t k : {1, 5, 10}) {
            double hits = static_cast<double>(std::ranges::count_if(ranks, [k](auto r) { return r <= k; }));
            CHECK(m.hits_at(k) == hits / static_cast<double>(ranks.size()));
        }
        CHECK(m.hits_at(1) <= m.hits_at(5));
        CHECK(m.hits_at(5) <= m.hits_at(10));

        QuerySet shifted = q;
        for (auto& lq : shifted.layers) {
            for (auto& x : lq.positives) x = std::exp(x) * 3 - 1;
            for (auto& x : lq.negatives) x = std::exp(x) * 3 - 1;
        }
        auto s = compute_metrics(shifted).pooled;
        CHECK(s.mrr == m.mrr);
        CHECK(s.hits == m.hits);
    }
}

TEST_CASE("summaries use population std and skip out-of-time rows") {
    MetricRow a{10, 0.5, {1, 5, 10}, {0.1, 0.2, 0.3}};
    MetricRow b{10, 0.7, {1, 5, 10}, {0.3, 0.4, 0.5}};
    std::vector<ResultRow> rows{{"M", 0, "all", false, a}, {"M", 1, "all", false, b}, {"M", 1, "1", false, a},
                                {"N", 0, "all", true, a}};
    auto s = summarize(rows);
    REQUIRE(s.size() == 2);
    CHECK(s[0].model == "M");
    CHECK(s[0].folds == 2);
    CHECK(s[0].mrr_mean == doctest::Approx(0.6));
    CHECK(s[0].mrr_std == doctest::Approx(0.1));
    CHECK(s[1].out_of_time == 1);
}

TEST_CASE("mean ensemble") {
    CHECK(ens_s_predict(std::vector<double>{0.2, 0.8}) == 0.5);
    CHECK(ens_s_predict(std::vector<double>{0.37}) == 0.37);
    CHECK(ens_s_predict(std::vector<double>{0.1, 0.1, 0.1, 0.9}) == doctest::Approx(0.3));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> p(1 + rng() % 5);
        for (auto& x : p) x = u(rng);
        double e = ens_s_predict(p);
        CHECK(e >= *std::ranges::min_element(p));
        CHECK(e <= *std::ranges::max_element(p));
    }
}

TEST_CASE("weighted ensemble") {
    CHECK(ens_w_predict(std::vector<double>{0, 0, 0}, std::vector<double>{0.1, 0.9, 0.4}) == 0.5);

    const std::size_t rows = 400;
    Matrix p(rows, 3, 0.5);
    std::vector<int> y(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        y[r] = static_cast<int>(r % 2);
        p(r, 1) = y[r];
    }
    EnsWConfig cfg{.seed = 3};
    auto m = train_ens_w(p, y, p, y, cfg);
    CHECK(std::abs(m.weights[1]) > std::abs(m.weights[0]));
    CHECK(std::abs(m.weights[1]) > std::abs(m.weights[2]));

    std::vector<std::size_t> perm{2, 0, 1};
    auto permuted = take_cols(p, perm);
    auto mp = train_ens_w(permuted, y, permuted, y, cfg);
    for (std::size_t i = 0; i < 3; ++i) CHECK(mp.weights[i] == doctest::Approx(m.weights[perm[i]]).epsilon(1e-12));
}

TEST_CASE("unique-correct fractions") {
    Matrix agree(3, 2);
    agree(0, 0) = agree(0, 1) = 0.9;
    agree(1, 0) = agree(1, 1) = 0.2;
    agree(2, 0) = agree(2, 1) = 0.7;
    std::vector<int> y{1, 0, 0};
    auto a = unique_correct_fractions(agree, y);
    CHECK(a.of_own_correct == std::vector<double>{0.0, 0.0});

    // A right on t1 and t2, B right on t2 only.
    Matrix ab(2, 2);
    ab(0, 0) = 0.9;
    ab(0, 1) = 0.1;
    ab(1, 0) = 0.8;
    ab(1, 1) = 0.8;
    auto u = unique_correct_fractions(ab, std::vector<int>{1, 1});
    CHECK(u.of_own_correct[0] == 0.5);
    CHECK(u.of_own_correct[1] == 0.0);
    CHECK(u.of_all[0] == 0.5);
    CHECK(u.correct == std::vector<std::size_t>{2, 1});

    Matrix wrong(2, 2, 0.9);
    wrong(0, 1) = wrong(1, 1) = 0.1;
    auto w = unique_correct_fractions(wrong, std::vector<int>{1, 1});
    CHECK(w.correct[1] == 0);
    CHECK(w.of_own_correct[1] == 0.0);
    CHECK_THROWS(unique_correct_fractions(Matrix(2, 1, 0.5), std::vector<int>{1, 0}));
}

TEST_CASE("gating weight report") {
    GaterConfig cfg;
    cfg.input_dim = 2;
    cfg.experts = 3;
    auto m = init_gater(cfg);
    const auto& last = m.net.shapes().back();
    auto params = m.net.params();
    std::fill(params.begin() + static_cast<std::ptrdiff_t>(last.weight_offset),
              params.begin() + static_cast<std::ptrdiff_t>(last.weight_offset + last.in * last.out), 0.0);
    m.scaler = FeatureScaler({0.0, 0.0}, {1.0, 1.0});

    Matrix raw(40, 2);
    for (std::size_t r = 0; r < 40; ++r) {
        raw(r, 0) = static_cast<double>(r % 7);
        raw(r, 1) = static_cast<double>(r) * 0.5;
    }
    std::vector<HeuristicId> hs{HeuristicId::CN, HeuristicId::AA};
    auto rep = gating_weight_report(m, raw, hs, 4);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(rep.mean[i] == doctest::Approx(1.0 / 3).epsilon(1e-14));
        CHECK(rep.stdev[i] == doctest::Approx(0.0).epsilon(1e-14));
    }
    for (auto h : hs) {
        double share = 0;
        std::size_t count = 0;
        for (const auto& q : rep.quantiles)
            if (q.heuristic == h) {
                share += q.share;
                count += q.count;
            }
        CHECK(share == doctest::Approx(1.0));
        CHECK(count == 40);
    }
    CHECK_THROWS_AS(gating_weight_report(m, Matrix(10, 2), hs, 4), DomainError);
}

TEST_CASE("gating report: the top quantile of the routing feature goes to its expert") {
    auto m = task::train_regime_gater(2);
    m.scaler = FeatureScaler({0.0, 0.0}, {1.0, 1.0});
    auto test = task::regime_batch(800, 5);
    std::vector<HeuristicId> hs{HeuristicId::CN, HeuristicId::JC};
    auto rep = gating_weight_report(m, test.features, hs, 4);
    const QuantileRow* top = nullptr;
    for (const auto& q : rep.quantiles)
        if (q.heuristic == HeuristicId::CN && (!top || q.bin > top->bin)) top = &q;
    REQUIRE(top != nullptr);
    CHECK(top->mean_weight[0] > 0.5);
}
