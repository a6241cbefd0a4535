// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "shapemoe/dataset.hpp"
#include "shapemoe/model.hpp"

namespace shapemoe {

// Shortest stable decimal form used for all CSV numbers, so identical values
// always produce identical bytes.
inline std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// |a AND b| / |a OR b|. Both-empty is undefined rather than 0 or 1; callers
// exclude such pairs.
inline std::optional<double> iou(const std::vector<uint8_t>& a,
                                 const std::vector<uint8_t>& b) {
    if (a.size() != b.size()) throw DimensionError("iou: mask sizes differ");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        bool av = a[i] != 0, bv = b[i] != 0;
        inter += av && bv;
        uni += av || bv;
    }
    if (uni == 0) return std::nullopt;
    return double(inter) / double(uni);
}

struct EvalReport {
    double miou_full = 0.0;
    double miou_occ = 0.0;
    size_t n_samples = 0;
    size_t n_occluded_samples = 0;
    std::vector<double> utilization;                 // per expert, sums to 1
    double utilization_entropy_normalized = 0.0;     // entropy / ln K, in [0,1]
    double purity = 0.0;
    std::vector<std::vector<size_t>> family_histogram;  // [K][num_families]
};

inline nlohmann::json eval_report_json(const EvalReport& r) {
    return nlohmann::json{{"miou_full", r.miou_full},
                          {"miou_occ", r.miou_occ},
                          {"n_samples", r.n_samples},
                          {"n_occluded_samples", r.n_occluded_samples},
                          {"utilization", r.utilization},
                          {"utilization_entropy_normalized", r.utilization_entropy_normalized},
                          {"purity", r.purity},
                          {"family_histogram", r.family_histogram}};
}

namespace detail {

// Assigned expert for diagnostics: highest gate value, lower index on ties.
template <typename S>
size_t assigned_expert(const TensorT<S>& pi) {
    size_t best = 0;
    for (size_t j = 1; j < pi.numel(); ++j)
        if (pi[j] > pi[best]) best = j;
    return best;
}

}  // namespace detail

// Runs the model in inference mode over the dataset (or with sampled routing
// noise when `stochastic_rng` is given) and aggregates segmentation and
// routing statistics.
template <typename S>
EvalReport evaluate(const ModelT<S>& model, const std::vector<Scene>& scenes,
                    Rng* stochastic_rng = nullptr) {
    if (scenes.empty()) throw ConfigError("evaluate: empty dataset");
    size_t kk = model.config().num_experts;
    size_t d = model.config().latent_dim;
    EvalReport rep;
    rep.n_samples = scenes.size();
    rep.utilization.assign(kk, 0.0);
    rep.family_histogram.assign(kk, std::vector<size_t>(kNumFamilies, 0));

    double sum_full = 0.0, sum_occ = 0.0;
    size_t n_full = 0;
    TapeT<S> tape(false);
    for (const Scene& sc : scenes) {
        tape.reset();
        TensorT<S> eta({d});
        if (stochastic_rng)
            for (size_t i = 0; i < d; ++i) eta[i] = S(stochastic_rng->normal());
        ForwardResultT<S> fw =
            model.forward(tape, sc, stochastic_rng ? &eta : nullptr);

        std::vector<uint8_t> pred(fw.logits.numel());
        for (size_t i = 0; i < pred.size(); ++i) pred[i] = fw.logits[i] >= S(0) ? 1 : 0;

        if (auto v = iou(pred, sc.amodal)) {
            sum_full += *v;
            ++n_full;
        }
        std::vector<uint8_t> gt_occ(sc.amodal.size()), pred_occ(sc.amodal.size());
        for (size_t i = 0; i < sc.amodal.size(); ++i) {
            uint8_t not_vis = sc.visible[i] ? 0 : 1;
            gt_occ[i] = sc.amodal[i] & not_vis;
            pred_occ[i] = pred[i] & not_vis;
        }
        bool occluded = false;
        for (uint8_t v : gt_occ)
            if (v) { occluded = true; break; }
        if (occluded) {
            ++rep.n_occluded_samples;
            if (auto v = iou(pred_occ, gt_occ)) sum_occ += *v;
        }

        const TensorT<S>& pi = fw.decision.pi.value();
        for (size_t j = 0; j < kk; ++j) rep.utilization[j] += double(pi[j]);
        rep.family_histogram[detail::assigned_expert(pi)][sc.family] += 1;
    }
    rep.miou_full = n_full ? sum_full / double(n_full) : 0.0;
    rep.miou_occ = rep.n_occluded_samples ? sum_occ / double(rep.n_occluded_samples) : 0.0;

    double mass = 0.0;
    for (double u : rep.utilization) mass += u;
    for (double& u : rep.utilization) u /= mass;
    if (kk == 1) {
        rep.utilization_entropy_normalized = 1.0;  // a single expert is trivially balanced
    } else {
        double h = 0.0;
        for (double u : rep.utilization)
            if (u > 0.0) h -= u * std::log(u);
        rep.utilization_entropy_normalized = h / std::log(double(kk));
    }
    size_t majority_total = 0;
    for (size_t j = 0; j < kk; ++j) {
        size_t best = 0;
        for (size_t f = 0; f < kNumFamilies; ++f)
            best = std::max(best, rep.family_histogram[j][f]);
        majority_total += best;
    }
    rep.purity = double(majority_total) / double(rep.n_samples);
    return rep;
}

// One CSV row per sample: identity, routing choice, gate mass, and the
// Gaussian shape parameters. Vector-valued fields are semicolon-joined.
template <typename S>
std::string routing_table(const ModelT<S>& model, const std::vector<Scene>& scenes,
                          Rng* stochastic_rng = nullptr) {
    size_t d = model.config().latent_dim;
    std::string out = "sample_id,family,selected,gates,mu,sigma\n";
    TapeT<S> tape(false);
    for (const Scene& sc : scenes) {
        tape.reset();
        TensorT<S> eta({d});
        if (stochastic_rng)
            for (size_t i = 0; i < d; ++i) eta[i] = S(stochastic_rng->normal());
        ForwardResultT<S> fw =
            model.forward(tape, sc, stochastic_rng ? &eta : nullptr);
        out += std::to_string(sc.sample_id) + "," + family_name(sc.family) + ",";
        const TensorT<S>& pi = fw.decision.pi.value();
        for (size_t i = 0; i < fw.decision.selected.size(); ++i)
            out += (i ? ";" : "") + std::to_string(fw.decision.selected[i]);
        out += ",";
        for (size_t i = 0; i < fw.decision.selected.size(); ++i)
            out += (i ? ";" : "") + fmt_g(double(pi[fw.decision.selected[i]]));
        out += ",";
        for (size_t i = 0; i < d; ++i) out += (i ? ";" : "") + fmt_g(double(fw.mu[i]));
        out += ",";
        for (size_t i = 0; i < d; ++i)
            out += (i ? ";" : "") + fmt_g(double(fw.sigma_eff[i]));
        out += "\n";
    }
    return out;
}

}  // namespace shapemoe
