// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "shapemoe/grad_check.hpp"
#include "shapemoe/model.hpp"
#include "shapemoe/ops.hpp"
#include "shapemoe/rng.hpp"

using namespace shapemoe;
using Catch::Approx;

namespace {

using Tape64 = TapeT<double>;
using Var64 = VarT<double>;

Tensor64 random64(std::vector<size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor64 t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Keeps relu probes away from its kink so central differences stay valid.
Tensor64 random64_off_zero(std::vector<size_t> shape, Rng& rng) {
    Tensor64 t = random64(std::move(shape), rng);
    for (double& v : t.data)
        if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
    return t;
}

// Scalarizes a tensor with fixed random weights so every element's gradient
// is distinct, then runs the central-difference comparison for all leaves.
GradCheckReport check_op(
    const std::string& name, std::vector<Tensor64>& leaves, Rng& rng,
    const std::function<Var64(Tape64&, const std::vector<Var64>&)>& build,
    double tol = 1e-4) {
    Tensor64 weights;
    bool have_weights = false;
    auto eval = [&](std::vector<Tensor64>* grads) {
        Tape64 tape(grads != nullptr);
        std::vector<Var64> vars;
        vars.reserve(leaves.size());
        for (const Tensor64& t : leaves) vars.push_back(tape.alloc(t));
        Var64 out = build(tape, vars);
        if (!have_weights) {
            weights = random64(out.value().shape, rng);
            have_weights = true;
        }
        Var64 loss = out.value().numel() == 1
                         ? out
                         : sum_all(mul(out, tape.alloc(weights)));
        double v = loss.value()[0];
        if (grads) {
            tape.backward(loss);
            grads->clear();
            for (const Var64& var : vars) grads->push_back(var.grad());
        }
        return v;
    };
    std::vector<Tensor64> analytic;
    eval(&analytic);
    std::vector<Tensor64*> params;
    std::vector<const Tensor64*> aptr;
    for (Tensor64& t : leaves) params.push_back(&t);
    for (const Tensor64& t : analytic) aptr.push_back(&t);
    return grad_check(name, [&] { return eval(nullptr); }, params, aptr, tol);
}

void require_pass(const GradCheckReport& rep, uint64_t seed) {
    INFO(rep.op_name << " seed " << seed << ": max rel err " << rep.max_rel_err
                     << " vs tol " << rep.tolerance);
    REQUIRE(rep.passed);
}

}  // namespace

TEST_CASE("grad check square function") {
    Tensor64 x({1}, {3.0});
    std::vector<Tensor64*> params{&x};
    Tensor64 analytic({1}, {6.0});
    std::vector<const Tensor64*> aptr{&analytic};
    auto rep = grad_check("square", [&] { return x[0] * x[0]; }, params, aptr);
    REQUIRE(rep.passed);
    REQUIRE(rep.max_rel_err < 1e-6);
}

TEST_CASE("grad check bce of sigmoid at zero") {
    Tensor64 z({1}, {0.0});
    Tensor64 target({1}, {1.0});
    auto f = [&] {
        Tape64 tape(false);
        auto loss = bce_with_logits_mean(tape.alloc(z), target);
        return loss.value()[0];
    };
    Tensor64 analytic({1}, {-0.5});  // sigmoid(0) - 1
    std::vector<Tensor64*> params{&z};
    std::vector<const Tensor64*> aptr{&analytic};
    REQUIRE(grad_check("bce_at_zero", f, params, aptr).passed);
}

TEST_CASE("grad check matmul") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(100 + seed);
        std::vector<Tensor64> leaves{random64({3, 4}, rng), random64({4, 2}, rng)};
        require_pass(check_op("matmul", leaves, rng,
                              [](Tape64&, const std::vector<Var64>& v) {
                                  return matmul(v[0], v[1]);
                              }),
                     seed);
    }
}

TEST_CASE("grad check conv2d both strides") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(200 + seed);
        size_t stride = 1 + seed % 2;
        std::vector<Tensor64> leaves{random64({2, 8, 8}, rng),
                                     random64({4, 2, 3, 3}, rng), random64({4}, rng)};
        require_pass(check_op("conv2d", leaves, rng,
                              [stride](Tape64&, const std::vector<Var64>& v) {
                                  return conv2d(v[0], v[1], v[2], stride);
                              }),
                     seed);
    }
}

TEST_CASE("grad check elementwise suite") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(300 + seed);
        {
            std::vector<Tensor64> leaves{random64({5}, rng), random64({5}, rng)};
            require_pass(check_op("add", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return add(v[0], v[1]);
                                  }),
                         seed);
        }
        {
            std::vector<Tensor64> leaves{random64({5}, rng), random64({5}, rng)};
            require_pass(check_op("sub_mul_mix", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return mul(sub(v[0], v[1]), v[1]);
                                  }),
                         seed);
        }
        {
            std::vector<Tensor64> leaves{random64_off_zero({6}, rng)};
            require_pass(check_op("relu", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return relu(v[0]);
                                  }),
                         seed);
        }
        {
            std::vector<Tensor64> leaves{random64({6}, rng, -4.0, 4.0)};
            require_pass(check_op("sigmoid", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return sigmoid(v[0]);
                                  }),
                         seed);
        }
        {
            std::vector<Tensor64> leaves{random64({6}, rng, -4.0, 4.0)};
            require_pass(check_op("softplus", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return softplus(v[0]);
                                  }),
                         seed);
        }
        {
            std::vector<Tensor64> leaves{random64({3}, rng)};
            require_pass(check_op("scale", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return scale(v[0], 2.5);
                                  }),
                         seed);
        }
    }
}

TEST_CASE("grad check pooling concat projection upsample") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(400 + seed);
        {
            std::vector<Tensor64> leaves{random64({3, 4, 4}, rng)};
            require_pass(check_op("mean_pool_spatial", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return mean_pool_spatial(v[0]);
                                  }),
                         seed);
        }
        {
            std::vector<Tensor64> leaves{random64({3}, rng), random64({4}, rng)};
            require_pass(check_op("concat_vec", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return concat_vec(v[0], v[1]);
                                  }),
                         seed);
        }
        {
            std::vector<Tensor64> leaves{random64({3, 4, 4}, rng), random64({3}, rng),
                                         random64({1}, rng)};
            require_pass(check_op("proj_spatial", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return proj_spatial(v[0], v[1], v[2]);
                                  }),
                         seed);
        }
        {
            std::vector<Tensor64> leaves{random64({2, 3, 3}, rng)};
            require_pass(check_op("bilinear_upsample", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return bilinear_upsample(v[0], 4);
                                  }),
                         seed);
        }
        {
            std::vector<Tensor64> leaves{random64({4, 6}, rng), random64({6}, rng),
                                         random64({4}, rng)};
            require_pass(check_op("linear_bias", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return linear_bias(v[0], v[1], v[2]);
                                  }),
                         seed);
        }
    }
}

TEST_CASE("grad check bce reduction") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(500 + seed);
        Tensor64 target({7});
        for (double& v : target.data) v = double(rng.below(2));
        std::vector<Tensor64> leaves{random64({7}, rng, -3.0, 3.0)};
        require_pass(check_op("bce_with_logits_mean", leaves, rng,
                              [&target](Tape64&, const std::vector<Var64>& v) {
                                  return bce_with_logits_mean(v[0], target);
                              }),
                     seed);
    }
}

TEST_CASE("grad check gate against frozen-selection softmax") {
    // exact mode is the true Jacobian of the masked softmax when the
    // selection cannot change, which central differences honor via the
    // forced-selection hook.
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(600 + seed);
        Tensor64 scores0 = random64({5}, rng, -2.0, 2.0);
        std::vector<double> raw(scores0.data.begin(), scores0.data.end());
        std::vector<uint32_t> frozen = topk_indices(raw, 2);
        std::vector<Tensor64> leaves{scores0};
        require_pass(check_op("gate_exact_k2", leaves, rng,
                              [&frozen](Tape64&, const std::vector<Var64>& v) {
                                  return gate(v[0], 2, GateBackward::exact, &frozen).pi;
                              }),
                     seed);
    }
}

TEST_CASE("grad check gate dense equals exact at full selection") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(700 + seed);
        {
            std::vector<Tensor64> leaves{random64({4}, rng, -2.0, 2.0)};
            require_pass(check_op("gate_dense_k_full", leaves, rng,
                                  [](Tape64&, const std::vector<Var64>& v) {
                                      return gate(v[0], 4, GateBackward::dense).pi;
                                  }),
                         seed);
        }
        // same input, both modes, identical gradients when nothing is masked
        Rng rng2(700 + seed);
        Tensor64 s0 = random64({4}, rng2, -2.0, 2.0);
        Tensor64 gseed = random64({4}, rng2);
        std::vector<Tensor64> grads[2];
        int gi = 0;
        for (GateBackward mode : {GateBackward::dense, GateBackward::exact}) {
            Tape64 tape;
            auto v = tape.alloc(s0);
            auto res = gate(v, 4, mode);
            tape.backward_seeded({{res.pi, gseed}});
            grads[gi++].push_back(v.grad());
        }
        for (size_t i = 0; i < 4; ++i)
            REQUIRE(grads[0][0][i] == Approx(grads[1][0][i]).margin(1e-12));
    }
}

TEST_CASE("grad check full model at sixteen pixels") {
    // All experts selected: the selection set cannot move under a small
    // parameter nudge, so central differences see a smooth function and the
    // dense gate rule coincides with the exact one. Every parameter block is
    // spot-checked, router included.
    GenConfig gc;
    gc.seed = 404;
    gc.count = 1;
    gc.side = 16;
    Scene scene = generate_scene(gc, 0);

    ModelConfig mc;
    mc.side = 16;
    mc.num_experts = 4;
    mc.top_k = 4;
    ModelT<double> model(mc);
    Rng init_rng(77);
    model.init(init_rng);
    // Fresh zero biases leave zero-patch conv pre-activations exactly on the
    // relu kink, where central differences straddle the corner; jittering all
    // parameters moves the probe to a generic point.
    Rng jitter(55);
    for (size_t i = 0; i < model.params().size(); ++i)
        for (double& v : model.params().value(i).data) v += jitter.uniform(-0.05, 0.05);

    Rng eta_rng(88);
    Tensor64 eta({mc.latent_dim});
    for (double& v : eta.data) v = eta_rng.normal();

    auto eval = [&](std::vector<Tensor64>* grads) {
        TapeT<double> tape(grads != nullptr);
        auto res = model.forward(tape, scene, &eta, GateBackward::dense);
        double v = res.bce.value()[0];
        if (grads) {
            tape.backward(res.bce);
            grads->assign(model.params().size(), Tensor64({1}));
            for (size_t i = 0; i < model.params().size(); ++i)
                (*grads)[i] = Tensor64(model.params().value(i).shape);
            res.leaves.accumulate_grads(*grads);
        }
        return v;
    };
    std::vector<Tensor64> analytic;
    eval(&analytic);
    std::vector<Tensor64*> params;
    std::vector<const Tensor64*> aptr;
    for (size_t i = 0; i < model.params().size(); ++i) {
        params.push_back(&model.params().value(i));
        aptr.push_back(&analytic[i]);
    }
    Rng pick(915);
    auto rep = grad_check("model_forward_topk_full", [&] { return eval(nullptr); },
                          params, aptr, 1e-4, 1e-5, 6, &pick);
    INFO("max rel err " << rep.max_rel_err);
    REQUIRE(rep.passed);
}

TEST_CASE("grad check full model at top-1 with frozen route") {
    GenConfig gc;
    gc.seed = 405;
    gc.count = 1;
    gc.side = 16;
    Scene scene = generate_scene(gc, 0);

    ModelConfig mc;
    mc.side = 16;
    mc.num_experts = 4;
    mc.top_k = 1;
    ModelT<double> model(mc);
    Rng init_rng(79);
    model.init(init_rng);
    Rng jitter(56);
    for (size_t i = 0; i < model.params().size(); ++i)
        for (double& v : model.params().value(i).data) v += jitter.uniform(-0.05, 0.05);

    Rng eta_rng(89);
    Tensor64 eta({mc.latent_dim});
    for (double& v : eta.data) v = eta_rng.normal();

    // Freeze the routing decision taken at the unperturbed parameters; with
    // k=1 the masked softmax is constant, so the router block's gradient is
    // zero on both sides of the comparison.
    std::vector<uint32_t> frozen;
    {
        TapeT<double> tape(false);
        auto res = model.forward(tape, scene, &eta, GateBackward::exact);
        frozen = res.decision.selected;
    }

    auto eval = [&](std::vector<Tensor64>* grads) {
        TapeT<double> tape(grads != nullptr);
        auto res = model.forward(tape, scene, &eta, GateBackward::exact, &frozen);
        double v = res.bce.value()[0];
        if (grads) {
            tape.backward(res.bce);
            grads->clear();
            for (size_t i = 0; i < model.params().size(); ++i)
                grads->push_back(Tensor64(model.params().value(i).shape));
            res.leaves.accumulate_grads(*grads);
        }
        return v;
    };
    std::vector<Tensor64> analytic;
    eval(&analytic);
    std::vector<Tensor64*> params;
    std::vector<const Tensor64*> aptr;
    for (size_t i = 0; i < model.params().size(); ++i) {
        params.push_back(&model.params().value(i));
        aptr.push_back(&analytic[i]);
    }
    Rng pick(916);
    auto rep = grad_check("model_forward_top1_frozen", [&] { return eval(nullptr); },
                          params, aptr, 1e-4, 1e-5, 6, &pick);
    INFO("max rel err " << rep.max_rel_err);
    REQUIRE(rep.passed);
}
