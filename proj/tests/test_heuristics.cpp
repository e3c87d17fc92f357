#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "mole/errors.hpp"
#include "mole/heuristics.hpp"
#include "oracles.hpp"

using namespace mole;

namespace {

MultilayerGraph g_of(const char* text) { return parse_edgelist(text).graph; }
NodeId id(const MultilayerGraph& g, const char* n) { return *g.find_entity(n); }

}  // namespace

TEST_CASE("common neighbors") {
    auto path = g_of("1 u w\n1 w v\n2 u v");
    CHECK(common_neighbors(path, id(path, "u"), id(path, "v"), 0) == 1);
    CHECK(common_neighbors(path, id(path, "u"), id(path, "v"), 1) == 0);

    auto k4 = g_of("1 a b\n1 a c\n1 a d\n1 b c\n1 b d\n1 c d\n2 a b");
    for (NodeId u = 0; u < 4; ++u)
        for (NodeId v = u + 1; v < 4; ++v) CHECK(common_neighbors(k4, u, v, 0) == 2);

    CHECK_THROWS_AS(common_neighbors(path, 0, 0, 0), DomainError);
    CHECK_THROWS_AS(common_neighbors(path, 0, 17, 0), DomainError);
    CHECK_THROWS_AS(common_neighbors(path, 0, 1, 4), DomainError);
}

TEST_CASE("jaccard") {
    auto g = g_of("1 u w\n1 u x\n1 v w\n2 u v\n2 p q");
    CHECK(jaccard(g, id(g, "u"), id(g, "v"), 0) == doctest::Approx(0.5));
    auto same = g_of("1 u a\n1 u b\n1 v a\n1 v b\n2 u v");
    CHECK(jaccard(same, id(same, "u"), id(same, "v"), 0) == 1.0);
    CHECK(jaccard(g, id(g, "p"), id(g, "q"), 0) == 0.0);
}

TEST_CASE("adamic-adar uses the natural log and skips degree-1 neighbors") {
    auto one = g_of("1 u w\n1 w v\n2 u v");
    CHECK(adamic_adar(one, id(one, "u"), id(one, "v"), 0) == doctest::Approx(1.0 / std::log(2.0)).epsilon(1e-12));
    CHECK(adamic_adar(one, id(one, "u"), id(one, "v"), 0) == doctest::Approx(1.442695).epsilon(1e-6));
    CHECK(adamic_adar(one, id(one, "u"), id(one, "v"), 1) == 0.0);

    auto two = g_of("1 u a\n1 a v\n1 u b\n1 b v\n1 b c\n2 u v");
    CHECK(adamic_adar(two, id(two, "u"), id(two, "v"), 0) == doctest::Approx(2.352934).epsilon(1e-6));

    auto directed = parse_edgelist("# directed=true\n1 u w\n2 u v").graph;
    CHECK(adamic_adar(directed, id(directed, "u"), id(directed, "v"), 1) == 0.0);
}

TEST_CASE("brute-force oracle agreement on small random graphs") {
    std::mt19937_64 rng(2024);
    PprParams tight{0.85, 1e-12, 5000};
    for (int t = 0; t < 40; ++t) {
        auto g = oracle::random_graph(rng, 2 + t % 3, 8, 0.35);
        for (LayerIndex l = 0; l < g.layer_count(); ++l) {
            auto adj = oracle::adjacency_sets(g, l);
            for (NodeId u = 0; u < g.entity_count(); ++u) {
                auto dense = oracle::ppr_dense(adj, u, tight.beta);
                auto r = ppr_vector(g, l, u, tight);
                CHECK(r.converged);
                for (NodeId v = 0; v < g.entity_count(); ++v) CHECK(std::abs(r.scores[v] - dense[v]) < 1e-8);
                for (NodeId v = u + 1; v < g.entity_count(); ++v) {
                    CHECK(common_neighbors(g, u, v, l) == oracle::common_neighbors(adj, u, v));
                    CHECK(jaccard(g, u, v, l) == oracle::jaccard(adj, u, v));
                    CHECK(adamic_adar(g, u, v, l) == doctest::Approx(oracle::adamic_adar(adj, u, v)).epsilon(1e-14));
                }
            }
        }
    }
}

TEST_CASE("ppr on two nodes matches the closed form") {
    auto g = g_of("1 u v\n2 u v");
    auto r = ppr_vector(g, 0, 0);
    CHECK(r.scores[1] == doctest::Approx(0.85 / 1.85).epsilon(1e-9));
    CHECK(r.scores[1] == doctest::Approx(0.459459).epsilon(1e-6));
    CHECK(ppr_pair(g, 0, 1, 0) == doctest::Approx(0.459459).epsilon(1e-6));
    CHECK(ppr_pair(g, 0, 1, 0) == ppr_pair(g, 1, 0, 0));
}

TEST_CASE("ppr vectors are stochastic and teleport-dominated for tiny beta") {
    auto g = generate_ws_multiplex({30, 2, 4, 0.3, 9});
    auto r = ppr_vector(g, 0, 3);
    CHECK(std::accumulate(r.scores.begin(), r.scores.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    for (double x : r.scores) CHECK(x >= 0.0);

    auto flat = ppr_vector(g, 0, 3, {1e-9, 1e-12, 100});
    CHECK(flat.scores[3] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("ppr across components is zero") {
    auto g = g_of("1 a b\n1 c d\n2 a c");
    CHECK(ppr_pair(g, 0, 2, 0, {0.85, 1e-14, 5000}) == 0.0);
}

TEST_CASE("ppr reports non-convergence") {
    auto g = generate_ws_multiplex({30, 2, 4, 0.3, 9});
    auto r = ppr_vector(g, 0, 0, {0.85, 1e-15, 2});
    CHECK_FALSE(r.converged);
    CHECK(r.iterations == 2);
    CHECK_THROWS_AS(PprParams({1.0, 1e-10, 10}).validate(), DomainError);
    CHECK_THROWS_AS(PprParams({0.5, 0.0, 10}).validate(), DomainError);
    CHECK_THROWS_AS(PprParams({0.5, 1e-10, 0}).validate(), DomainError);
}

TEST_CASE("heuristics are symmetric on undirected layers") {
    auto g = generate_ws_multiplex({40, 3, 4, 0.2, 5});
    HeuristicEngine engine(g);
    for (NodeId u = 0; u < 10; ++u)
        for (NodeId v = u + 1; v < 12; ++v)
            for (auto h : kAllHeuristics) CHECK(engine.score(h, u, v, 1) == engine.score(h, v, u, 1));
}

TEST_CASE("adding a common neighbor never lowers CN or AA") {
    auto before = g_of("1 u a\n1 a v\n1 u b\n1 b x\n2 u v");
    auto after = g_of("1 u a\n1 a v\n1 u b\n1 b x\n1 b v\n2 u v");
    CHECK(common_neighbors(after, 0, 2, 0) > common_neighbors(before, 0, 2, 0));
    CHECK(adamic_adar(after, 0, 2, 0) > adamic_adar(before, 0, 2, 0));
}

TEST_CASE("multilayer score") {
    std::vector<double> s{0.8, 0.2, 0.4};
    CHECK(multilayer_score(s, 0, 0.5) == doctest::Approx(0.55));
    CHECK(multilayer_score(s, 0, 1.0, true) == 0.8);
    std::vector<double> two{0.3, 0.9};
    CHECK(multilayer_score(two, 1, 0.5) == doctest::Approx(0.6));
    CHECK_THROWS_AS(multilayer_score(s, 0, 1.0), DomainError);
    CHECK_THROWS_AS(multilayer_score(s, 0, 0.0), DomainError);
    std::vector<double> one{1.0};
    CHECK_THROWS_AS(multilayer_score(one, 0, 0.5), DomainError);
}

TEST_CASE("heuristic feature vectors") {
    auto g = g_of("1 u w\n1 w v\n2 u x\n2 x v");
    LabeledTriple t{id(g, "u"), id(g, "v"), 0, 1, 0};
    auto cn = heuristic_features(g, t, {HeuristicId::CN}, 0.5);
    CHECK(cn.values == std::vector<double>{1.0});

    auto all = heuristic_features(g, t, {HeuristicId::PPR, HeuristicId::CN, HeuristicId::AA, HeuristicId::JC}, 0.5);
    CHECK(all.values.size() == 4);
    CHECK(all.heuristics == std::vector<HeuristicId>(std::begin(kAllHeuristics), std::end(kAllHeuristics)));

    auto lonely = g_of("1 a b\n2 c d\n1 c e");
    LabeledTriple q{id(lonely, "a"), id(lonely, "d"), 0, 0, -1};
    auto f = heuristic_features(lonely, q, {HeuristicId::CN, HeuristicId::JC, HeuristicId::AA, HeuristicId::PPR}, 0.5);
    CHECK(f.values[0] == 0.0);
    CHECK(f.values[1] == 0.0);
    CHECK(f.values[2] == 0.0);
    CHECK(f.values[3] >= 0.0);
}

TEST_CASE("batched extraction matches direct evaluation and is thread-invariant") {
    auto g = generate_ws_multiplex({60, 3, 4, 0.2, 1});
    HeuristicEngine engine(g);
    TripleList triples;
    for (NodeId u = 0; u < 20; ++u) triples.push_back({u, static_cast<NodeId>((u * 7 + 3) % 60), u % 3, 0, -1});
    std::vector<HeuristicId> hs(std::begin(kAllHeuristics), std::end(kAllHeuristics));
    auto one = extract_layer_features(engine, triples, hs, false, 1);
    auto four = extract_layer_features(engine, triples, hs, false, 4);
    CHECK(one.values == four.values);
    auto agg = aggregate_features(one, triples, 0.5);
    for (std::size_t i = 0; i < triples.size(); ++i) {
        auto direct = heuristic_features(g, triples[i], hs, 0.5);
        for (std::size_t h = 0; h < 4; ++h) CHECK(agg(i, h) == doctest::Approx(direct.values[h]).epsilon(1e-12));
    }
    auto cn_only = select_heuristics(one, {HeuristicId::CN});
    CHECK(cn_only.values.cols == 3);
    CHECK(cn_only.values(5, 2) == one.values(5, one.layout.column(0, 2)));
}

TEST_CASE("leave-pair-out scores match the graph with the pair removed") {
    auto g = generate_ws_multiplex({40, 2, 4, 0.1, 3});
    HeuristicEngine engine(g);
    const auto& e = g.edges(0)[5];
    NodePair p = NodePair::of(e.source, e.target);
    auto masked = g.without_pairs(std::span(&p, 1));
    HeuristicEngine reference(masked);
    for (auto h : kAllHeuristics)
        for (LayerIndex l = 0; l < 2; ++l)
            CHECK(engine.score(h, e.source, e.target, l, true) ==
                  doctest::Approx(reference.score(h, e.source, e.target, l)).epsilon(1e-10));
}

TEST_CASE("feature scaler") {
    Matrix rows(2, 1);
    rows(0, 0) = 0;
    rows(1, 0) = 2;
    auto s = FeatureScaler::fit(rows);
    CHECK(s.apply(std::vector<double>{1.0})[0] == 0.0);
    CHECK(s.apply(std::vector<double>{2.0})[0] == 1.0);

    Matrix constant(3, 2, 4.0);
    constant(1, 1) = 5.0;
    auto c = FeatureScaler::fit(constant);
    CHECK(c.apply(std::vector<double>{4.0, 0.0})[0] == 0.0);
    CHECK(c.apply(std::vector<double>{9.0, 0.0})[0] == 5.0);
    CHECK(c.stdev()[0] == 1.0);
    CHECK_THROWS_AS(FeatureScaler::fit(Matrix(0, 2)), DomainError);
    CHECK_THROWS_AS(FeatureScaler::fit(Matrix(1, 2)), DomainError);
}

TEST_CASE("heuristic names") {
    for (auto h : kAllHeuristics) CHECK(heuristic_from_string(to_string(h)) == h);
    CHECK(heuristic_from_string("ppr") == HeuristicId::PPR);
    CHECK_THROWS_AS(heuristic_from_string("Katz"), DomainError);
    CHECK_THROWS_AS(normalize_heuristics({}), DomainError);
    CHECK(normalize_heuristics({HeuristicId::AA, HeuristicId::CN, HeuristicId::AA}) ==
          std::vector<HeuristicId>{HeuristicId::CN, HeuristicId::AA});
}
