#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library code under test except to
// read graph structure back out of a MultilayerGraph.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mole/gating.hpp"
#include "mole/graph.hpp"

namespace oracle {

using Adjacency = std::vector<std::set<std::uint32_t>>;

/// Undirected view of one layer as plain neighbor sets.
inline Adjacency adjacency_sets(const mole::MultilayerGraph& g, mole::LayerIndex l) {
    Adjacency adj(g.entity_count());
    for (const auto& e : g.edges(l)) {
        adj[e.source].insert(e.target);
        adj[e.target].insert(e.source);
    }
    return adj;
}

inline std::size_t common_neighbors(const Adjacency& adj, std::uint32_t u, std::uint32_t v) {
    std::size_t n = 0;
    for (auto w : adj[u]) n += adj[v].count(w);
    return n;
}

inline double jaccard(const Adjacency& adj, std::uint32_t u, std::uint32_t v) {
    std::set<std::uint32_t> uni = adj[u];
    uni.insert(adj[v].begin(), adj[v].end());
    if (uni.empty()) return 0.0;
    return static_cast<double>(common_neighbors(adj, u, v)) / static_cast<double>(uni.size());
}

inline double adamic_adar(const Adjacency& adj, std::uint32_t u, std::uint32_t v) {
    double s = 0.0;
    for (auto w : adj[u])
        if (adj[v].count(w) && adj[w].size() >= 2) s += 1.0 / std::log(static_cast<double>(adj[w].size()));
    return s;
}

/// Solves (I - beta M) r = (1 - beta) e_u by Gaussian elimination with
/// partial pivoting, where M is the column-stochastic walk matrix and
/// isolated nodes send their column to u.
inline std::vector<double> ppr_dense(const Adjacency& adj, std::uint32_t u, double beta) {
    const std::size_t n = adj.size();
    std::vector<std::vector<double>> a(n, std::vector<double>(n + 1, 0.0));
    for (std::size_t i = 0; i < n; ++i) a[i][i] = 1.0;
    for (std::size_t w = 0; w < n; ++w) {
        if (adj[w].empty()) {
            a[u][w] -= beta;
            continue;
        }
        double share = 1.0 / static_cast<double>(adj[w].size());
        for (auto x : adj[w]) a[x][w] -= beta * share;
    }
    a[u][n] = 1.0 - beta;
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t p = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
        std::swap(a[c], a[p]);
        for (std::size_t r = 0; r < n; ++r) {
            if (r == c || a[r][c] == 0.0) continue;
            double f = a[r][c] / a[c][c];
            for (std::size_t k = c; k <= n; ++k) a[r][k] -= f * a[c][k];
        }
    }
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = a[i][n] / a[i][i];
    return r;
}

/// Random multilayer graph with `layers` layers over at most `max_nodes`
/// entities. Every entity appears in at least one layer.
inline mole::MultilayerGraph random_graph(std::mt19937_64& rng, std::size_t layers, std::size_t max_nodes,
                                          double density) {
    for (;;) {
        std::uniform_int_distribution<std::size_t> nodes_dist(3, max_nodes);
        std::size_t n = nodes_dist(rng);
        std::bernoulli_distribution coin(density);
        mole::GraphBuilder b(false);
        for (std::size_t i = 0; i < n; ++i) b.add_entity("n" + std::to_string(i));
        std::vector<char> seen(n, 0);
        for (std::size_t l = 1; l <= layers; ++l) {
            b.add_layer(static_cast<int>(l));
            for (std::uint32_t i = 0; i < n; ++i)
                for (std::uint32_t j = i + 1; j < n; ++j)
                    if (coin(rng)) {
                        b.add_edge(static_cast<int>(l), i, j);
                        seen[i] = seen[j] = 1;
                    }
        }
        if (std::all_of(seen.begin(), seen.end(), [](char c) { return c != 0; })) return std::move(b).build();
    }
}

/// Rank of every positive by a full sort of its layer: position of the
/// positive after placing all tied negatives ahead of it.
inline std::size_t rank_by_sort(double positive, const std::vector<double>& negatives) {
    std::vector<std::pair<double, int>> all;
    for (double n : negatives) all.emplace_back(n, 0);
    all.emplace_back(positive, 1);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t i = 0; i < all.size(); ++i)
        if (all[i].second == 1) return i + 1;
    return all.size();
}

/// Summed BCE of a gater over a batch, evaluated from scratch.
inline double gater_loss(const mole::GaterModel& model, const mole::GaterBatch& batch, const mole::Routing& routing) {
    double loss = 0.0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        auto w = mole::gate_forward(model, batch.features.row(r), routing);
        double z = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) z += w[i] * batch.scores(r, i);
        double p = std::clamp(1.0 / (1.0 + std::exp(-z)), 1e-12, 1.0 - 1e-12);
        loss -= batch.labels[r] ? std::log(p) : std::log(1.0 - p);
    }
    return loss;
}

/// Distance of a gater's forward pass from its nondifferentiable points:
/// the smallest |pre-activation| of any hidden unit and, under top-k
/// routing, the smallest gap between the k-th and (k+1)-th logit.
inline double kink_margin(const mole::GaterModel& model, const mole::GaterBatch& batch,
                          const mole::Routing& routing) {
    const auto& shapes = model.net.shapes();
    auto p = model.net.params();
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < batch.size(); ++r) {
        std::vector<double> x(batch.features.row(r).begin(), batch.features.row(r).end());
        for (std::size_t layer = 0; layer < shapes.size(); ++layer) {
            const auto& s = shapes[layer];
            std::vector<double> y(s.out);
            for (std::size_t o = 0; o < s.out; ++o) {
                double z = p[s.bias_offset + o];
                for (std::size_t i = 0; i < s.in; ++i) z += p[s.weight_offset + o * s.in + i] * x[i];
                y[o] = z;
            }
            if (layer + 1 < shapes.size()) {
                for (double& z : y) {
                    margin = std::min(margin, std::abs(z));
                    z = std::max(0.0, z);
                }
            } else if (routing.mode == mole::RoutingMode::TopK && routing.k < y.size()) {
                std::sort(y.begin(), y.end(), std::greater<>());
                margin = std::min(margin, y[routing.k - 1] - y[routing.k]);
            }
            x = std::move(y);
        }
    }
    return margin;
}

/// Relative error with an absolute floor for near-zero gradients.
inline double gradient_error(double analytic, double numeric) {
    double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < 1e-7) return std::abs(analytic - numeric);
    return std::abs(analytic - numeric) / scale;
}

/// Largest gradient error over every parameter, by central differences.
inline double max_gradient_error(const mole::GaterModel& model, const mole::GaterBatch& batch,
                                 const mole::Routing& routing, double eps = 1e-5) {
    auto analytic = mole::gater_gradients(model, batch, routing).values;
    mole::GaterModel probe = model;
    auto params = probe.net.params();
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        double saved = params[i];
        params[i] = saved + eps;
        double up = gater_loss(probe, batch, routing);
        params[i] = saved - eps;
        double down = gater_loss(probe, batch, routing);
        params[i] = saved;
        worst = std::max(worst, gradient_error(analytic[i], (up - down) / (2 * eps)));
    }
    return worst;
}

}  // namespace oracle
