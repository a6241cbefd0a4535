// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "shapemoe/ops.hpp"
#include "shapemoe/params.hpp"

namespace shapemoe {

template <typename S>
struct RoutingDecisionT {
    VarT<S> scores;                  // K affinities s = W l_o
    VarT<S> pi;                      // K gate values, exact zeros at unselected
    std::vector<uint32_t> selected;  // ascending, size k
};

using RoutingDecision = RoutingDecisionT<float>;

// Affinity scores via the bias-free router matrix, then top-k masking with
// softmax over the survivors. `forced_selection` bypasses the top-k pick so
// finite-difference checks can hold the selection fixed.
template <typename S>
RoutingDecisionT<S> route(ParamLeavesT<S>& pl, VarT<S> l_o, size_t k, GateBackward mode,
                          const std::vector<uint32_t>* forced_selection = nullptr) {
    VarT<S> w = pl.leaf("router.w");
    const size_t num_experts = w.value().shape[0];
    if (k < 1 || k > num_experts)
        throw ConfigError("route: k must be in [1, " + std::to_string(num_experts) + "], got " +
                          std::to_string(k));
    VarT<S> scores = linear(w, l_o);
    GateResult<S> g = gate(scores, k, mode, forced_selection);
    return {scores, g.pi, std::move(g.selected)};
}

}  // namespace shapemoe
