// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "shapemoe/errors.hpp"
#include "shapemoe/ops.hpp"

namespace shapemoe {

// Architecture knobs. The trunk downsamples twice by stride 2, so the canvas
// side must be divisible by 4.
struct ModelConfig {
    size_t side = 64;          // canvas height = width
    size_t embed_dim = 64;     // mask embedding e_m dimension
    size_t latent_dim = 16;    // shape latent l_o dimension
    size_t num_experts = 4;    // K
    size_t top_k = 1;          // k selected per sample
    size_t trunk_c1 = 32;      // first trunk conv channels
    size_t feat_c = 64;        // trunk output channels (feature map F)
    size_t embed_c1 = 32;      // first mask-embedder conv channels
    size_t mlp_hidden = 32;    // mu/sigma MLP hidden width
    size_t expert_hidden = 8;  // expert hypernetwork hidden width

    size_t feat_side() const { return side / 4; }

    void validate() const {
        if (side < 8 || side % 4 != 0)
            throw ConfigError("side must be a multiple of 4 and at least 8, got " +
                              std::to_string(side));
        if (num_experts < 1) throw ConfigError("num_experts must be at least 1");
        if (top_k < 1 || top_k > num_experts)
            throw ConfigError("top_k must be in [1, num_experts], got " +
                              std::to_string(top_k) + " with " +
                              std::to_string(num_experts) + " experts");
        if (embed_dim < 1 || latent_dim < 1 || trunk_c1 < 1 || feat_c < 1 ||
            embed_c1 < 1 || mlp_hidden < 1 || expert_hidden < 1)
            throw ConfigError("all architecture dimensions must be positive");
    }
};

struct TrainConfig {
    uint64_t seed = 1;
    size_t epochs = 20;
    size_t batch_size = 16;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double balance_weight = 1.0;
    GateBackward gate_backward = GateBackward::dense;
    ModelConfig model;

    void validate() const {
        model.validate();
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (lr < 0.0) throw ConfigError("learning rate must be nonnegative");
        if (balance_weight < 0.0) throw ConfigError("balance_weight must be nonnegative");
        // With one selected expert the balance statistic needs at least two
        // samples per batch to carry any gradient.
        if (balance_weight > 0.0 && model.top_k == 1 && batch_size < 2)
            throw ConfigError("batch_size must be at least 2 when balance_weight > 0 and top_k = 1");
    }
};

struct GenConfig {
    uint64_t seed = 1;
    size_t count = 0;
    size_t side = 64;
    size_t occluder_min = 1;
    size_t occluder_max = 3;
    double visible_lo = 0.30;
    double visible_hi = 0.95;
    double unoccluded_prob = 0.10;
    double noise_sigma = 0.05;

    void validate() const {
        if (side < 8 || side % 4 != 0)
            throw ConfigError("side must be a multiple of 4 and at least 8, got " +
                              std::to_string(side));
        if (occluder_min < 1 || occluder_max < occluder_min)
            throw ConfigError("occluder count range is not well-ordered");
        if (!(0.0 < visible_lo && visible_lo <= visible_hi && visible_hi < 1.0))
            throw ConfigError("visible-fraction range must satisfy 0 < lo <= hi < 1");
        if (unoccluded_prob < 0.0 || unoccluded_prob > 1.0)
            throw ConfigError("unoccluded_prob must be in [0, 1]");
        if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be nonnegative");
    }
};

}  // namespace shapemoe
