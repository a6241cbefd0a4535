// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "shapemoe/config.hpp"
#include "shapemoe/ops.hpp"
#include "shapemoe/params.hpp"

namespace shapemoe {

template <typename S>
struct ShapeDistributionT {
    VarT<S> mu;         // latent_dim
    VarT<S> sigma_raw;  // latent_dim, pre-activation
};

template <typename S>
struct LatentShapeT {
    VarT<S> l_o;        // latent_dim
    VarT<S> sigma_eff;  // softplus(sigma_raw), strictly positive
};

// Visible mask [1,h,w] -> mask embedding e_m via two stride-2 convs and a
// spatial mean pool.
template <typename S>
VarT<S> embed_mask(ParamLeavesT<S>& pl, VarT<S> mask) {
    VarT<S> h1 = relu(conv2d(mask, pl.leaf("embed.conv1.w"), pl.leaf("embed.conv1.b"), 2));
    VarT<S> h2 = conv2d(h1, pl.leaf("embed.conv2.w"), pl.leaf("embed.conv2.b"), 2);
    return mean_pool_spatial(h2);
}

// Two separate MLPs map e_m to the Gaussian parameters (mu, sigma_raw).
template <typename S>
ShapeDistributionT<S> encode_distribution(ParamLeavesT<S>& pl, VarT<S> e_m) {
    VarT<S> mh = relu(linear_bias(pl.leaf("mu.fc1.w"), e_m, pl.leaf("mu.fc1.b")));
    VarT<S> mu = linear_bias(pl.leaf("mu.fc2.w"), mh, pl.leaf("mu.fc2.b"));
    VarT<S> sh = relu(linear_bias(pl.leaf("sigma.fc1.w"), e_m, pl.leaf("sigma.fc1.b")));
    VarT<S> sg = linear_bias(pl.leaf("sigma.fc2.w"), sh, pl.leaf("sigma.fc2.b"));
    return {mu, sg};
}

// Reparameterized draw l_o = mu + softplus(sigma_raw) * eta. A null eta means
// inference: the noise is zero and l_o is exactly mu.
template <typename S>
LatentShapeT<S> sample_latent(TapeT<S>& tape, const ShapeDistributionT<S>& dist,
                              const TensorT<S>* eta) {
    VarT<S> sp = softplus(dist.sigma_raw);
    if (eta == nullptr) return {dist.mu, sp};
    if (!eta->same_shape(dist.mu.value()))
        throw DimensionError("sample_latent: eta shape mismatch");
    VarT<S> eta_leaf = tape.alloc(*eta);
    return {add(dist.mu, mul(sp, eta_leaf)), sp};
}

}  // namespace shapemoe
