// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "shapemoe/rng.hpp"
#include "shapemoe/tensor.hpp"

namespace shapemoe {

struct GradCheckReport {
    std::string op_name;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

// Compares analytic gradients against central finite differences. `f` must be
// a deterministic scalar function of the tensors behind `params` (all
// randomness frozen by the caller); it is re-evaluated with each probed
// element nudged by ±step. Everything runs in 64-bit.
//
// `max_elems_per_tensor` limits how many elements of each parameter tensor are
// probed (0 means all); probed indices are drawn from `pick` so large models
// can be spot-checked in bounded time.
inline GradCheckReport grad_check(const std::string& op_name,
                                  const std::function<double()>& f,
                                  const std::vector<Tensor64*>& params,
                                  const std::vector<const Tensor64*>& analytic,
                                  double tol = 1e-4, double step = 1e-3,
                                  size_t max_elems_per_tensor = 0,
                                  Rng* pick = nullptr) {
    if (params.size() != analytic.size())
        throw DimensionError("grad_check: params/analytic count mismatch");
    GradCheckReport rep;
    rep.op_name = op_name;
    rep.tolerance = tol;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor64& p = *params[pi];
        const Tensor64& a = *analytic[pi];
        if (!p.same_shape(a))
            throw DimensionError("grad_check: analytic gradient shape mismatch");
        std::vector<size_t> idx;
        size_t n = p.numel();
        if (max_elems_per_tensor == 0 || n <= max_elems_per_tensor) {
            idx.resize(n);
            for (size_t i = 0; i < n; ++i) idx[i] = i;
        } else {
            for (size_t i = 0; i < max_elems_per_tensor; ++i)
                idx.push_back(pick ? size_t(pick->below(n)) : (i * n) / max_elems_per_tensor);
        }
        for (size_t i : idx) {
            double saved = p[i];
            p[i] = saved + step;
            double up = f();
            p[i] = saved - step;
            double down = f();
            p[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("grad_check: non-finite evaluation in " + op_name);
            double numeric = (up - down) / (2.0 * step);
            double ana = a[i];
            double rel = std::abs(ana - numeric) /
                         std::max({std::abs(ana), std::abs(numeric), 1e-8});
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
        }
    }
    rep.passed = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace shapemoe
