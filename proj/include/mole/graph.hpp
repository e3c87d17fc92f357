#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mole {

using NodeId = std::uint32_t;
using LayerIndex = std::uint32_t;

/// Which adjacency a neighborhood query reads on directed layers.
/// Undirected layers ignore the mode.
enum class NeighborMode { Union, Out, In };

NeighborMode neighbor_mode_from_string(std::string_view s);
std::string_view to_string(NeighborMode mode);

/// Compressed sparse rows with sorted, duplicate-free targets.
struct Csr {
    std::vector<std::uint32_t> offsets;
    std::vector<NodeId> targets;

    std::span<const NodeId> row(NodeId u) const {
        return {targets.data() + offsets[u], targets.data() + offsets[u + 1]};
    }
    std::size_t degree(NodeId u) const { return offsets[u + 1] - offsets[u]; }
};

struct Edge {
    NodeId source;
    NodeId target;
    friend bool operator==(const Edge&, const Edge&) = default;
    friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Unordered entity pair, stored with first < second.
struct NodePair {
    NodeId first;
    NodeId second;
    static NodePair of(NodeId a, NodeId b) { return a < b ? NodePair{a, b} : NodePair{b, a}; }
    std::uint64_t key() const { return (static_cast<std::uint64_t>(first) << 32) | second; }
    friend bool operator==(const NodePair&, const NodePair&) = default;
    friend auto operator<=>(const NodePair&, const NodePair&) = default;
};

/// A set of layers over a shared entity set.
///
/// Immutable once built. Every layer keeps CSR adjacency over all entities
/// (entities absent from a layer simply have degree zero there), plus the
/// membership set V_l of entities that carry at least one edge in that
/// layer of the source data. Undirected edges are stored once as
/// (min, max); directed layers additionally keep reverse and union rows.
class MultilayerGraph {
public:
    MultilayerGraph() = default;

    std::size_t entity_count() const { return entities_.size(); }
    std::size_t layer_count() const { return layers_.size(); }
    bool directed() const { return directed_; }

    const std::vector<std::string>& entities() const { return entities_; }
    const std::string& entity_name(NodeId u) const;
    std::optional<NodeId> find_entity(std::string_view name) const;

    /// External (file) id of a layer.
    int layer_id(LayerIndex l) const;
    std::optional<LayerIndex> find_layer(int id) const;
    std::vector<int> layer_ids() const;

    /// Edges of a layer in canonical sorted order.
    const std::vector<Edge>& edges(LayerIndex l) const;
    std::size_t edge_count(LayerIndex l) const { return edges(l).size(); }
    std::size_t total_edge_count() const;

    /// Checked neighborhood query; throws DomainError on unknown node/layer.
    std::span<const NodeId> neighbors(NodeId u, LayerIndex l, NeighborMode mode = NeighborMode::Union) const;
    std::size_t degree(NodeId u, LayerIndex l, NeighborMode mode = NeighborMode::Union) const {
        return neighbors(u, l, mode).size();
    }

    /// Unchecked union-view adjacency for hot loops.
    const Csr& adjacency(LayerIndex l) const { return layers_[l].both; }

    /// True if u and v are linked in either direction.
    bool linked(NodeId u, NodeId v, LayerIndex l) const;
    bool has_edge(NodeId source, NodeId target, LayerIndex l) const;

    /// Membership in V_l (taken from the source data, preserved by masking).
    bool in_layer(NodeId u, LayerIndex l) const { return layers_[l].members[u] != 0; }
    std::size_t layer_node_count(LayerIndex l) const;
    std::vector<NodeId> layer_nodes(LayerIndex l) const;

    /// Copy with every edge between the given unordered pairs removed from
    /// all layers. Entities, layers and memberships are kept.
    MultilayerGraph without_pairs(std::span<const NodePair> pairs) const;

    /// All unordered pairs linked in at least one layer, sorted.
    std::vector<NodePair> linked_pairs() const;

    /// Stable digest of entities, layers and edges.
    std::uint64_t content_hash() const;

    void check_node(NodeId u) const;
    void check_layer(LayerIndex l) const;

    friend bool operator==(const MultilayerGraph& a, const MultilayerGraph& b);

private:
    friend class GraphBuilder;

    struct Layer {
        int id = 0;
        std::vector<Edge> edges;
        std::vector<char> members;
        Csr out;
        Csr in;
        Csr both;
    };

    void index_layer(Layer& layer) const;

    bool directed_ = false;
    std::vector<std::string> entities_;
    std::unordered_map<std::string, NodeId> entity_index_;
    std::vector<Layer> layers_;
};

/// Incremental construction. Self-loops and duplicates are counted and dropped.
class GraphBuilder {
public:
    explicit GraphBuilder(bool directed) : directed_(directed) {}

    NodeId add_entity(std::string_view name);
    /// Returns false when the edge was dropped (self-loop or duplicate).
    bool add_edge(int layer_id, NodeId source, NodeId target);
    bool add_edge(int layer_id, std::string_view source, std::string_view target);
    /// Declares a layer even if it ends up with no edges.
    void add_layer(int layer_id);

    std::size_t self_loops_dropped() const { return self_loops_; }
    std::size_t duplicates_dropped() const { return duplicates_; }

    /// Throws StructuralError if fewer than `min_layers` layers or no entities.
    MultilayerGraph build(std::size_t min_layers = 2) &&;

private:
    struct PendingLayer {
        int id;
        std::vector<Edge> edges;
        std::unordered_map<std::uint64_t, char> seen;
    };
    PendingLayer& layer_for(int id);

    bool directed_;
    std::vector<std::string> entities_;
    std::unordered_map<std::string, NodeId> entity_index_;
    std::vector<PendingLayer> layers_;
    std::unordered_map<int, std::size_t> layer_index_;
    std::size_t self_loops_ = 0;
    std::size_t duplicates_ = 0;
};

struct EdgeListOptions {
    /// Default orientation; a `# directed=...` header comment overrides it.
    bool directed = false;
    std::size_t min_layers = 2;
};

struct ParsedEdgeList {
    MultilayerGraph graph;
    std::size_t self_loops_dropped = 0;
    std::size_t duplicates_dropped = 0;
};

/// Parses the `.mlel` format: `layer_id source target [weight]` per line,
/// `#` comments, optional `# directed=true|false`, `# node <name>` and
/// `# layer <id>` directives. Weights are accepted and ignored.
ParsedEdgeList parse_edgelist(std::string_view text, EdgeListOptions options = {});
ParsedEdgeList read_edgelist(const std::string& path, EdgeListOptions options = {});

/// Inverse of parse_edgelist. Emits `# node` and `# layer` directives only
/// when the edge stream alone would not reproduce the entity or layer list.
std::string write_edgelist(const MultilayerGraph& g);

struct WsParams {
    std::size_t entities = 0;
    std::size_t layers = 0;
    std::size_t ring_degree = 0;
    double rewire_probability = 0.0;
    std::uint64_t seed = 0;
};

/// Independent Watts-Strogatz realizations, one per layer, over entities
/// named "0".."N-1". Layer ids are 1..layers.
MultilayerGraph generate_ws_multiplex(const WsParams& params);

struct LayerStats {
    int layer_id = 0;
    std::size_t node_count = 0;
    std::size_t edge_count = 0;
    double average_degree = 0.0;
    double clustering = 0.0;
    double density = 0.0;
};

/// Structural summary per layer. Clustering is the global coefficient
/// 3 * triangles / connected triples on the undirected view.
std::vector<LayerStats> layer_stats(const MultilayerGraph& g);

}  // namespace mole
