#include "mole/graph.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

#include "mole/errors.hpp"
#include "mole/random.hpp"
#include "mole/util.hpp"

namespace mole {

NeighborMode neighbor_mode_from_string(std::string_view s) {
    if (s == "union") return NeighborMode::Union;
    if (s == "out") return NeighborMode::Out;
    if (s == "in") return NeighborMode::In;
    throw DomainError("unknown neighbor mode '" + std::string(s) + "'");
}

std::string_view to_string(NeighborMode mode) {
    switch (mode) {
        case NeighborMode::Union: return "union";
        case NeighborMode::Out: return "out";
        case NeighborMode::In: return "in";
    }
    return "union";
}

namespace {

Csr build_csr(std::size_t n, const std::vector<Edge>& edges, bool forward, bool backward) {
    Csr csr;
    csr.offsets.assign(n + 1, 0);
    for (const auto& e : edges) {
        if (forward) ++csr.offsets[e.source + 1];
        if (backward) ++csr.offsets[e.target + 1];
    }
    std::partial_sum(csr.offsets.begin(), csr.offsets.end(), csr.offsets.begin());
    csr.targets.resize(csr.offsets.back());
    std::vector<std::uint32_t> cursor(csr.offsets.begin(), csr.offsets.end() - 1);
    for (const auto& e : edges) {
        if (forward) csr.targets[cursor[e.source]++] = e.target;
        if (backward) csr.targets[cursor[e.target]++] = e.source;
    }
    for (std::size_t u = 0; u < n; ++u) {
        auto first = csr.targets.begin() + csr.offsets[u];
        auto last = csr.targets.begin() + csr.offsets[u + 1];
        std::sort(first, last);
    }
    return csr;
}

// Union rows of a directed layer: a node linked both ways appears once.
Csr merge_csr(std::size_t n, const Csr& a, const Csr& b) {
    Csr csr;
    csr.offsets.assign(n + 1, 0);
    std::vector<NodeId> row;
    for (std::size_t u = 0; u < n; ++u) {
        auto ra = a.row(static_cast<NodeId>(u));
        auto rb = b.row(static_cast<NodeId>(u));
        row.clear();
        std::set_union(ra.begin(), ra.end(), rb.begin(), rb.end(), std::back_inserter(row));
        csr.targets.insert(csr.targets.end(), row.begin(), row.end());
        csr.offsets[u + 1] = static_cast<std::uint32_t>(csr.targets.size());
    }
    return csr;
}

}  // namespace

void MultilayerGraph::index_layer(Layer& layer) const {
    const std::size_t n = entities_.size();
    std::sort(layer.edges.begin(), layer.edges.end());
    if (directed_) {
        layer.out = build_csr(n, layer.edges, true, false);
        layer.in = build_csr(n, layer.edges, false, true);
        layer.both = merge_csr(n, layer.out, layer.in);
    } else {
        layer.both = build_csr(n, layer.edges, true, true);
    }
}

const std::string& MultilayerGraph::entity_name(NodeId u) const {
    check_node(u);
    return entities_[u];
}

std::optional<NodeId> MultilayerGraph::find_entity(std::string_view name) const {
    auto it = entity_index_.find(std::string(name));
    if (it == entity_index_.end()) return std::nullopt;
    return it->second;
}

int MultilayerGraph::layer_id(LayerIndex l) const {
    check_layer(l);
    return layers_[l].id;
}

std::optional<LayerIndex> MultilayerGraph::find_layer(int id) const {
    for (std::size_t l = 0; l < layers_.size(); ++l)
        if (layers_[l].id == id) return static_cast<LayerIndex>(l);
    return std::nullopt;
}

std::vector<int> MultilayerGraph::layer_ids() const {
    std::vector<int> ids;
    for (const auto& layer : layers_) ids.push_back(layer.id);
    return ids;
}

const std::vector<Edge>& MultilayerGraph::edges(LayerIndex l) const {
    check_layer(l);
    return layers_[l].edges;
}

std::size_t MultilayerGraph::total_edge_count() const {
    std::size_t total = 0;
    for (const auto& layer : layers_) total += layer.edges.size();
    return total;
}

void MultilayerGraph::check_node(NodeId u) const {
    if (u >= entities_.size()) throw DomainError("unknown node " + std::to_string(u));
}

void MultilayerGraph::check_layer(LayerIndex l) const {
    if (l >= layers_.size()) throw DomainError("unknown layer index " + std::to_string(l));
}

std::span<const NodeId> MultilayerGraph::neighbors(NodeId u, LayerIndex l, NeighborMode mode) const {
    check_node(u);
    check_layer(l);
    const auto& layer = layers_[l];
    if (!directed_) return layer.both.row(u);
    switch (mode) {
        case NeighborMode::Out: return layer.out.row(u);
        case NeighborMode::In: return layer.in.row(u);
        case NeighborMode::Union: break;
    }
    return layer.both.row(u);
}

bool MultilayerGraph::linked(NodeId u, NodeId v, LayerIndex l) const {
    auto row = layers_[l].both.row(u);
    return std::binary_search(row.begin(), row.end(), v);
}

bool MultilayerGraph::has_edge(NodeId source, NodeId target, LayerIndex l) const {
    check_node(source);
    check_node(target);
    check_layer(l);
    if (!directed_) return linked(source, target, l);
    auto row = layers_[l].out.row(source);
    return std::binary_search(row.begin(), row.end(), target);
}

std::size_t MultilayerGraph::layer_node_count(LayerIndex l) const {
    check_layer(l);
    const auto& m = layers_[l].members;
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), char{1}));
}

std::vector<NodeId> MultilayerGraph::layer_nodes(LayerIndex l) const {
    check_layer(l);
    std::vector<NodeId> nodes;
    const auto& m = layers_[l].members;
    for (std::size_t u = 0; u < m.size(); ++u)
        if (m[u]) nodes.push_back(static_cast<NodeId>(u));
    return nodes;
}

MultilayerGraph MultilayerGraph::without_pairs(std::span<const NodePair> pairs) const {
    std::unordered_set<std::uint64_t> masked;
    masked.reserve(pairs.size() * 2);
    for (const auto& p : pairs) masked.insert(NodePair::of(p.first, p.second).key());

    MultilayerGraph g;
    g.directed_ = directed_;
    g.entities_ = entities_;
    g.entity_index_ = entity_index_;
    g.layers_.reserve(layers_.size());
    for (const auto& layer : layers_) {
        Layer copy;
        copy.id = layer.id;
        copy.members = layer.members;
        for (const auto& e : layer.edges)
            if (!masked.count(NodePair::of(e.source, e.target).key())) copy.edges.push_back(e);
        g.index_layer(copy);
        g.layers_.push_back(std::move(copy));
    }
    return g;
}

std::vector<NodePair> MultilayerGraph::linked_pairs() const {
    std::vector<NodePair> pairs;
    for (const auto& layer : layers_)
        for (const auto& e : layer.edges) pairs.push_back(NodePair::of(e.source, e.target));
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    return pairs;
}

std::uint64_t MultilayerGraph::content_hash() const {
    Fnv1a h;
    h.update(directed_ ? "D" : "U");
    for (const auto& name : entities_) {
        h.update(name);
        h.update("\n");
    }
    for (const auto& layer : layers_) {
        h.update(&layer.id, sizeof layer.id);
        for (const auto& e : layer.edges) h.update(&e, sizeof e);
    }
    return h.value();
}

bool operator==(const MultilayerGraph& a, const MultilayerGraph& b) {
    if (a.directed_ != b.directed_ || a.entities_ != b.entities_ || a.layers_.size() != b.layers_.size())
        return false;
    for (std::size_t l = 0; l < a.layers_.size(); ++l) {
        if (a.layers_[l].id != b.layers_[l].id || a.layers_[l].edges != b.layers_[l].edges) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------

NodeId GraphBuilder::add_entity(std::string_view name) {
    auto [it, inserted] = entity_index_.try_emplace(std::string(name), static_cast<NodeId>(entities_.size()));
    if (inserted) entities_.emplace_back(name);
    return it->second;
}

GraphBuilder::PendingLayer& GraphBuilder::layer_for(int id) {
    auto [it, inserted] = layer_index_.try_emplace(id, layers_.size());
    if (inserted) layers_.push_back(PendingLayer{id, {}, {}});
    return layers_[it->second];
}

void GraphBuilder::add_layer(int layer_id) { layer_for(layer_id); }

bool GraphBuilder::add_edge(int layer_id, NodeId source, NodeId target) {
    if (source >= entities_.size() || target >= entities_.size())
        throw DomainError("edge endpoint is not a declared entity");
    auto& layer = layer_for(layer_id);
    if (source == target) {
        ++self_loops_;
        return false;
    }
    Edge e = directed_ ? Edge{source, target} : Edge{std::min(source, target), std::max(source, target)};
    std::uint64_t key = (static_cast<std::uint64_t>(e.source) << 32) | e.target;
    if (!layer.seen.emplace(key, 1).second) {
        ++duplicates_;
        return false;
    }
    layer.edges.push_back(e);
    return true;
}

bool GraphBuilder::add_edge(int layer_id, std::string_view source, std::string_view target) {
    NodeId s = add_entity(source);
    NodeId t = add_entity(target);
    return add_edge(layer_id, s, t);
}

MultilayerGraph GraphBuilder::build(std::size_t min_layers) && {
    if (entities_.empty()) throw StructuralError("network has no entities");
    if (layers_.size() < min_layers)
        throw StructuralError("network has " + std::to_string(layers_.size()) + " layer(s); at least " +
                              std::to_string(min_layers) + " required");
    std::sort(layers_.begin(), layers_.end(),
              [](const PendingLayer& a, const PendingLayer& b) { return a.id < b.id; });

    MultilayerGraph g;
    g.directed_ = directed_;
    g.entities_ = std::move(entities_);
    g.entity_index_ = std::move(entity_index_);
    for (auto& pending : layers_) {
        MultilayerGraph::Layer layer;
        layer.id = pending.id;
        layer.edges = std::move(pending.edges);
        layer.members.assign(g.entities_.size(), 0);
        for (const auto& e : layer.edges) {
            layer.members[e.source] = 1;
            layer.members[e.target] = 1;
        }
        g.index_layer(layer);
        g.layers_.push_back(std::move(layer));
    }
    return g;
}

// ---------------------------------------------------------------------------

ParsedEdgeList parse_edgelist(std::string_view text, EdgeListOptions options) {
    bool directed = options.directed;
    // The orientation header must precede the first edge, so scan for it first.
    {
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t end = text.find('\n', pos);
            if (end == std::string_view::npos) end = text.size();
            auto tokens = split_whitespace(text.substr(pos, end - pos));
            pos = end + 1;
            if (tokens.empty()) continue;
            if (tokens[0].front() != '#') break;
            for (auto t : tokens) {
                if (t == "directed=true") directed = true;
                if (t == "directed=false") directed = false;
            }
        }
    }

    GraphBuilder builder(directed);
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        auto tokens = split_whitespace(line);
        if (tokens.empty()) continue;
        if (tokens[0].front() == '#') {
            // `# node <name>` declares an entity ahead of its first edge,
            // `# layer <id>` a layer that may hold no edges.
            if (tokens.size() == 3 && tokens[0] == "#" && tokens[1] == "node") builder.add_entity(tokens[2]);
            long long declared;
            if (tokens.size() == 3 && tokens[0] == "#" && tokens[1] == "layer" && parse_int(tokens[2], declared) &&
                declared > 0 && declared <= 1'000'000'000)
                builder.add_layer(static_cast<int>(declared));
            continue;
        }
        if (tokens.size() != 3 && tokens.size() != 4)
            throw ParseError(line_no, "expected 'layer source target [weight]', got " +
                                          std::to_string(tokens.size()) + " tokens");
        long long layer;
        if (!parse_int(tokens[0], layer) || layer <= 0 || layer > 1'000'000'000)
            throw ParseError(line_no, "layer id '" + std::string(tokens[0]) + "' is not a positive integer");
        if (tokens.size() == 4) {
            double w;
            if (!parse_double(tokens[3], w))
                throw ParseError(line_no, "weight '" + std::string(tokens[3]) + "' is not a number");
        }
        builder.add_edge(static_cast<int>(layer), tokens[1], tokens[2]);
    }
    ParsedEdgeList out;
    out.self_loops_dropped = builder.self_loops_dropped();
    out.duplicates_dropped = builder.duplicates_dropped();
    out.graph = std::move(builder).build(options.min_layers);
    return out;
}

ParsedEdgeList read_edgelist(const std::string& path, EdgeListOptions options) {
    return parse_edgelist(read_file(path), options);
}

std::string write_edgelist(const MultilayerGraph& g) {
    std::string out = g.directed() ? "# directed=true\n" : "# directed=false\n";

    // Would replaying the edges alone reproduce the entity numbering?
    std::vector<char> seen(g.entity_count(), 0);
    NodeId next = 0;
    bool ordered = true;
    for (LayerIndex l = 0; l < g.layer_count() && ordered; ++l) {
        for (const auto& e : g.edges(l)) {
            for (NodeId u : {e.source, e.target}) {
                if (seen[u]) continue;
                if (u != next) {
                    ordered = false;
                    break;
                }
                seen[u] = 1;
                ++next;
            }
            if (!ordered) break;
        }
    }
    if (!ordered || next != g.entity_count())
        for (const auto& name : g.entities()) out += "# node " + name + "\n";

    bool empty_layer = false;
    for (LayerIndex l = 0; l < g.layer_count(); ++l) empty_layer = empty_layer || g.edges(l).empty();
    if (empty_layer)
        for (LayerIndex l = 0; l < g.layer_count(); ++l) out += "# layer " + std::to_string(g.layer_id(l)) + "\n";

    for (LayerIndex l = 0; l < g.layer_count(); ++l) {
        const std::string id = std::to_string(g.layer_id(l));
        for (const auto& e : g.edges(l)) {
            out += id;
            out += ' ';
            out += g.entities()[e.source];
            out += ' ';
            out += g.entities()[e.target];
            out += '\n';
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

MultilayerGraph generate_ws_multiplex(const WsParams& params) {
    const std::size_t n = params.entities;
    const std::size_t k = params.ring_degree;
    if (params.layers < 2) throw DomainError("WS multiplex needs at least 2 layers");
    if (k < 2 || k % 2 != 0) throw DomainError("ring degree k must be even and >= 2");
    if (n <= k) throw DomainError("entity count must exceed ring degree");
    if (!(params.rewire_probability >= 0.0 && params.rewire_probability <= 1.0))
        throw DomainError("rewiring probability must lie in [0, 1]");

    GraphBuilder builder(false);
    for (std::size_t i = 0; i < n; ++i) builder.add_entity(std::to_string(i));

    for (std::size_t layer = 1; layer <= params.layers; ++layer) {
        Rng rng(derive_seed(params.seed, {0x5753ULL, layer}));
        std::vector<std::vector<NodeId>> adj(n);
        auto connected = [&](NodeId a, NodeId b) {
            return std::find(adj[a].begin(), adj[a].end(), b) != adj[a].end();
        };
        auto unlink = [&](NodeId a, NodeId b) {
            adj[a].erase(std::find(adj[a].begin(), adj[a].end(), b));
            adj[b].erase(std::find(adj[b].begin(), adj[b].end(), a));
        };
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 1; j <= k / 2; ++j) {
                auto a = static_cast<NodeId>(i);
                auto b = static_cast<NodeId>((i + j) % n);
                adj[a].push_back(b);
                adj[b].push_back(a);
            }
        if (params.rewire_probability > 0.0) {
            for (std::size_t j = 1; j <= k / 2; ++j) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (!rng.bernoulli(params.rewire_probability)) continue;
                    auto u = static_cast<NodeId>(i);
                    auto v = static_cast<NodeId>((i + j) % n);
                    if (adj[u].size() >= n - 1) continue;
                    // Rejection sampling is uniform over the admissible targets.
                    NodeId w;
                    do {
                        w = static_cast<NodeId>(rng.index(n));
                    } while (w == u || connected(u, w));
                    unlink(u, v);
                    adj[u].push_back(w);
                    adj[w].push_back(u);
                }
            }
        }
        builder.add_layer(static_cast<int>(layer));
        for (std::size_t u = 0; u < n; ++u)
            for (NodeId v : adj[u])
                if (u < v) builder.add_edge(static_cast<int>(layer), static_cast<NodeId>(u), v);
    }
    return std::move(builder).build();
}

std::vector<LayerStats> layer_stats(const MultilayerGraph& g) {
    std::vector<LayerStats> stats;
    for (LayerIndex l = 0; l < g.layer_count(); ++l) {
        LayerStats s;
        s.layer_id = g.layer_id(l);
        s.node_count = g.layer_node_count(l);
        s.edge_count = g.edge_count(l);
        const double nodes = static_cast<double>(s.node_count);
        const double edges = static_cast<double>(s.edge_count);
        if (s.node_count > 0) s.average_degree = (g.directed() ? 1.0 : 2.0) * edges / nodes;
        if (s.node_count > 1) {
            double pairs = nodes * (nodes - 1.0) / (g.directed() ? 1.0 : 2.0);
            s.density = edges / pairs;
        }

        const Csr& adj = g.adjacency(l);
        double triangles = 0.0;
        double triples = 0.0;
        for (NodeId u = 0; u < g.entity_count(); ++u) {
            auto ru = adj.row(u);
            double d = static_cast<double>(ru.size());
            triples += d * (d - 1.0) / 2.0;
            for (NodeId v : ru) {
                if (v <= u) continue;
                auto rv = adj.row(v);
                // Count w > v adjacent to both, so each triangle is seen once.
                auto iu = std::upper_bound(ru.begin(), ru.end(), v);
                auto iv = std::upper_bound(rv.begin(), rv.end(), v);
                while (iu != ru.end() && iv != rv.end()) {
                    if (*iu < *iv) ++iu;
                    else if (*iv < *iu) ++iv;
                    else {
                        triangles += 1.0;
                        ++iu;
                        ++iv;
                    }
                }
            }
        }
        s.clustering = triples > 0.0 ? 3.0 * triangles / triples : 0.0;
        stats.push_back(s);
    }
    return stats;
}

}  // namespace mole
