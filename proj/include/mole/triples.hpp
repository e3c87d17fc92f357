#pragma once

#include <string_view>
#include <vector>

#include "mole/graph.hpp"

namespace mole {

enum class SplitRole { Train, Validation, Test };

std::string_view to_string(SplitRole role);

/// A (u, v, l, y) example with its provenance.
struct LabeledTriple {
    NodeId u = 0;
    NodeId v = 0;
    LayerIndex layer = 0;
    int label = 0;
    /// Fold of the pair for positives, or the fold whose split drew the negative.
    int fold = -1;

    NodePair pair() const { return NodePair::of(u, v); }
    friend bool operator==(const LabeledTriple&, const LabeledTriple&) = default;
};

using TripleList = std::vector<LabeledTriple>;

}  // namespace mole
