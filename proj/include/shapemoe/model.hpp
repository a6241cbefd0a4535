// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "shapemoe/config.hpp"
#include "shapemoe/dataset.hpp"
#include "shapemoe/experts.hpp"
#include "shapemoe/params.hpp"
#include "shapemoe/router.hpp"
#include "shapemoe/shape_encoder.hpp"

namespace shapemoe {

template <typename S>
struct MaskPredictionT {
    TensorT<S> logits;           // [1,h,w]
    TensorT<S> probability;      // sigmoid(logits)
    std::vector<uint8_t> binary; // probability >= 0.5, equivalently logits >= 0
};

template <typename S>
MaskPredictionT<S> make_prediction(const TensorT<S>& logits) {
    MaskPredictionT<S> p;
    p.logits = logits;
    p.probability.shape = logits.shape;
    p.probability.data.reserve(logits.numel());
    p.binary.reserve(logits.numel());
    for (S z : logits.data) {
        p.probability.data.push_back(stable_sigmoid(z));
        p.binary.push_back(z >= S(0) ? 1 : 0);
    }
    return p;
}

template <typename S>
struct ForwardResultT {
    VarT<S> bce;                   // scalar pixel loss for this sample
    RoutingDecisionT<S> decision;  // live on the tape
    TensorT<S> logits;             // combined full-res logits, value copy
    TensorT<S> mu;                 // value copies for routing inspection
    TensorT<S> sigma_eff;
    ParamLeavesT<S> leaves;        // for gradient extraction after backward
};

// The whole network: mask embedder, Gaussian shape encoder, router, shared
// trunk, and K expert branches, over one named parameter set.
template <typename S>
class ModelT {
public:
    explicit ModelT(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        register_params();
    }

    const ModelConfig& config() const { return cfg_; }
    ParamSetT<S>& params() { return params_; }
    const ParamSetT<S>& params() const { return params_; }

    // He initialization for weights, zeros for biases, drawn in registration
    // order from the given stream. The pre-sigma bias starts negative so the
    // initial routing noise (softplus(-2) ~ 0.13) is small next to the spread
    // of the mean latents; with noise at softplus(0) the balance loss can be
    // satisfied by noisy exploration alone while deterministic inference
    // routing collapses onto one expert.
    void init(Rng& rng) {
        for (size_t i = 0; i < params_.size(); ++i) {
            if (fan_in_[i] > 0)
                he_init(params_.value(i), fan_in_[i], rng);
            else
                params_.value(i).fill(S(0));
        }
        params_.get("sigma.fc2.b").fill(S(-2));
    }

    // Full forward pass for one sample. eta == nullptr means inference
    // (zero noise, l_o = mu). Only the selected experts are evaluated.
    ForwardResultT<S> forward(TapeT<S>& tape, const Scene& scene, const TensorT<S>* eta,
                              GateBackward mode = GateBackward::dense,
                              const std::vector<uint32_t>* forced_selection = nullptr) const {
        if (scene.h != cfg_.side || scene.w != cfg_.side)
            throw DimensionError("forward: scene is " + std::to_string(scene.h) + "x" +
                                 std::to_string(scene.w) + " but model expects side " +
                                 std::to_string(cfg_.side));
        size_t hw = scene.h * scene.w;
        TensorT<S> x2({2, scene.h, scene.w});
        TensorT<S> mv({1, scene.h, scene.w});
        for (size_t i = 0; i < hw; ++i) {
            x2[i] = S(scene.image[i]);
            x2[hw + i] = S(scene.visible[i]);
            mv[i] = S(scene.visible[i]);
        }
        ParamLeavesT<S> pl(tape, params_);
        VarT<S> x2v = tape.alloc(std::move(x2));
        VarT<S> mvv = tape.alloc(std::move(mv));

        VarT<S> e_m = embed_mask(pl, mvv);
        ShapeDistributionT<S> dist = encode_distribution(pl, e_m);
        LatentShapeT<S> lat = sample_latent(tape, dist, eta);
        RoutingDecisionT<S> dec = route(pl, lat.l_o, cfg_.top_k, mode, forced_selection);

        VarT<S> feat = trunk_forward(pl, x2v);
        VarT<S> pooled = mean_pool_spatial(feat);
        VarT<S> query = concat_vec(e_m, pooled);
        std::vector<VarT<S>> expert_logits;
        expert_logits.reserve(dec.selected.size());
        for (uint32_t j : dec.selected)
            expert_logits.push_back(expert_forward(pl, j, query, feat, &expert_evals_));
        VarT<S> combined = predict_amodal(dec, expert_logits);

        TensorT<S> target({1, scene.h, scene.w});
        for (size_t i = 0; i < hw; ++i) target[i] = S(scene.amodal[i]);
        VarT<S> bce = bce_with_logits_mean(combined, target);

        return ForwardResultT<S>{bce,           dec, combined.value(), dist.mu.value(),
                                 lat.sigma_eff.value(), std::move(pl)};
    }

    // Expert-evaluation instrument: every expert_forward call counts once.
    size_t expert_evaluations() const { return expert_evals_; }
    void reset_expert_evaluations() const { expert_evals_ = 0; }

    size_t param_count_with_prefix(const std::string& prefix) const {
        size_t n = 0;
        for (size_t i = 0; i < params_.size(); ++i)
            if (params_.name(i).starts_with(prefix)) n += params_.value(i).numel();
        return n;
    }
    size_t trunk_param_count() const { return param_count_with_prefix("trunk."); }
    size_t expert_param_count(size_t j) const {
        return param_count_with_prefix("expert" + std::to_string(j) + ".");
    }
    double expert_bank_fraction() const {
        size_t bank = 0;
        for (size_t j = 0; j < cfg_.num_experts; ++j) bank += expert_param_count(j);
        return double(bank) / double(trunk_param_count());
    }

private:
    TensorT<S>& addp(const std::string& name, std::vector<size_t> shape, size_t fan_in) {
        fan_in_.push_back(fan_in);
        return params_.add(name, std::move(shape));
    }

    void register_params() {
        auto conv = [&](const std::string& n, size_t co, size_t ci) {
            addp(n + ".w", {co, ci, 3, 3}, ci * 9);
            addp(n + ".b", {co}, 0);
        };
        auto fc = [&](const std::string& n, size_t out, size_t in) {
            addp(n + ".w", {out, in}, in);
            addp(n + ".b", {out}, 0);
        };
        conv("trunk.conv1", cfg_.trunk_c1, 2);
        conv("trunk.conv2", cfg_.feat_c, cfg_.trunk_c1);
        conv("trunk.ref1", cfg_.feat_c, cfg_.feat_c);
        conv("trunk.ref2", cfg_.feat_c, cfg_.feat_c);
        conv("embed.conv1", cfg_.embed_c1, 1);
        conv("embed.conv2", cfg_.embed_dim, cfg_.embed_c1);
        fc("mu.fc1", cfg_.mlp_hidden, cfg_.embed_dim);
        fc("mu.fc2", cfg_.latent_dim, cfg_.mlp_hidden);
        fc("sigma.fc1", cfg_.mlp_hidden, cfg_.embed_dim);
        fc("sigma.fc2", cfg_.latent_dim, cfg_.mlp_hidden);
        addp("router.w", {cfg_.num_experts, cfg_.latent_dim}, cfg_.latent_dim);
        for (size_t j = 0; j < cfg_.num_experts; ++j) {
            std::string p = "expert" + std::to_string(j);
            fc(p + ".fc1", cfg_.expert_hidden, cfg_.embed_dim + cfg_.feat_c);
            fc(p + ".fc2", cfg_.feat_c, cfg_.expert_hidden);
            addp(p + ".bias", {1}, 0);
        }
    }

    ModelConfig cfg_;
    ParamSetT<S> params_;
    std::vector<size_t> fan_in_;
    mutable size_t expert_evals_ = 0;
};

using Model = ModelT<float>;

// Copies a model into another scalar type (the 64-bit shadow used by the
// gradient checks).
template <typename D, typename S>
ModelT<D> cast_model(const ModelT<S>& m) {
    ModelT<D> out(m.config());
    for (size_t i = 0; i < m.params().size(); ++i) {
        const TensorT<S>& src = m.params().value(i);
        TensorT<D>& dst = out.params().value(i);
        for (size_t j = 0; j < src.numel(); ++j) dst[j] = D(src[j]);
    }
    return out;
}

}  // namespace shapemoe
