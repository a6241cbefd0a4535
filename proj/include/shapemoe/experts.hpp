// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "shapemoe/ops.hpp"
#include "shapemoe/params.hpp"
#include "shapemoe/router.hpp"

namespace shapemoe {

// Shared trunk: two stride-2 encoder convs over the image+visible-mask stack,
// then two stride-1 refiner convs, ReLU after each. Output F is
// [feat_c, h/4, w/4].
template <typename S>
VarT<S> trunk_forward(ParamLeavesT<S>& pl, VarT<S> x) {
    VarT<S> h = relu(conv2d(x, pl.leaf("trunk.conv1.w"), pl.leaf("trunk.conv1.b"), 2));
    h = relu(conv2d(h, pl.leaf("trunk.conv2.w"), pl.leaf("trunk.conv2.b"), 2));
    h = relu(conv2d(h, pl.leaf("trunk.ref1.w"), pl.leaf("trunk.ref1.b"), 1));
    h = relu(conv2d(h, pl.leaf("trunk.ref2.w"), pl.leaf("trunk.ref2.b"), 1));
    return h;
}

// One expert branch: a hypernetwork MLP maps the query to a per-pixel linear
// classifier (w_j, b_j) over F's channels; the low-res response is upsampled
// back to canvas resolution. Only called for selected experts, and the
// counter records every call (the compute-sparsity instrument).
template <typename S>
VarT<S> expert_forward(ParamLeavesT<S>& pl, size_t j, VarT<S> query, VarT<S> feat,
                       size_t* eval_counter) {
    std::string p = "expert" + std::to_string(j);
    VarT<S> h = relu(linear_bias(pl.leaf(p + ".fc1.w"), query, pl.leaf(p + ".fc1.b")));
    VarT<S> w = linear_bias(pl.leaf(p + ".fc2.w"), h, pl.leaf(p + ".fc2.b"));
    VarT<S> lo = proj_spatial(feat, w, pl.leaf(p + ".bias"));
    if (eval_counter) ++*eval_counter;
    return bilinear_upsample(lo, 4);
}

// Gate-weighted sum of the selected experts' logits. logits_selected[i]
// corresponds to decision.selected[i].
template <typename S>
VarT<S> predict_amodal(const RoutingDecisionT<S>& decision,
                       const std::vector<VarT<S>>& logits_selected) {
    if (logits_selected.size() != decision.selected.size())
        throw DimensionError("predict_amodal: logits count does not match selection");
    VarT<S> out = scale_by_gate(logits_selected[0], decision.pi, decision.selected[0]);
    for (size_t i = 1; i < logits_selected.size(); ++i)
        out = add(out, scale_by_gate(logits_selected[i], decision.pi, decision.selected[i]));
    return out;
}

}  // namespace shapemoe
