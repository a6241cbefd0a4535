// SPDX-License-Identifier: Apache-2.0
//
// Release gate. Ten checks covering gradients, routing properties, loss and
// metric oracles, scaled-down ablation trends, interpretability,
// reproducibility, and compute sparsity. Each check contributes exactly one
// PASS/FAIL line to the summary; the process exits nonzero if any fail.
//
// The trend checks share one synthetic corpus (4,000 train / 1,000 val at
// 64x64) and a cached grid of training runs, so the binary takes a while;
// progress lines stream as each run finishes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "shapemoe/shapemoe.hpp"

using namespace shapemoe;
namespace fs = std::filesystem;

namespace {

// Trend-run budget. Twelve epochs keeps the six expert-count runs inside the
// one-hour window with margin while the mixture separation is already stable.
constexpr size_t kTrendEpochs = 12;
constexpr size_t kTrendSide = 64;
constexpr size_t kTrainCount = 4000;
constexpr size_t kValCount = 1000;
const std::vector<uint64_t> kSeeds{1, 2, 3};

double now_s() {
    using clock = std::chrono::steady_clock;
    static const clock::time_point t0 = clock::now();
    return std::chrono::duration<double>(clock::now() - t0).count();
}

struct Check {
    int id = 0;
    std::string name;
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) { return fmt_g(v); }

// ---------------------------------------------------------------------------
// Shared corpus and training grid

struct Corpus {
    std::vector<Scene> train;
    std::vector<Scene> val;
    double gen_seconds = 0.0;
};

const Corpus& corpus() {
    static Corpus c = [] {
        Corpus out;
        double t0 = now_s();
        GenConfig g;
        g.side = kTrendSide;
        g.seed = 1;
        g.count = kTrainCount;
        out.train = generate_corpus(g);
        g.seed = 2;
        g.count = kValCount;
        out.val = generate_corpus(g);
        out.gen_seconds = now_s() - t0;
        std::printf("corpus: %zu train / %zu val at %zux%zu (%.1f s)\n", out.train.size(),
                    out.val.size(), kTrendSide, kTrendSide, out.gen_seconds);
        std::fflush(stdout);
        return out;
    }();
    return c;
}

struct RunResult {
    EvalReport report;
    double seconds = 0.0;
    double train_loss = 0.0;
};

struct RunKey {
    size_t experts, topk;
    double bw;
    uint64_t seed;
    bool operator<(const RunKey& o) const {
        return std::tie(experts, topk, bw, seed) < std::tie(o.experts, o.topk, o.bw, o.seed);
    }
};

const RunResult& trend_run(size_t experts, size_t topk, double bw, uint64_t seed) {
    static std::map<RunKey, RunResult> cache;
    RunKey key{experts, topk, bw, seed};
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    double t0 = now_s();
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.epochs = kTrendEpochs;
    cfg.balance_weight = bw;
    cfg.model.side = kTrendSide;
    cfg.model.num_experts = experts;
    cfg.model.top_k = topk;

    Trainer trainer(cfg);
    std::vector<EpochStats> stats = trainer.train(corpus().train, corpus().val);
    RunResult r;
    r.report = evaluate(trainer.model(), corpus().val);
    r.seconds = now_s() - t0;
    r.train_loss = stats.empty() ? 0.0 : stats.back().train_loss;
    std::printf(
        "run K=%zu k=%zu bw=%g seed=%llu: miou_full=%.4f miou_occ=%.4f entropy=%.3f "
        "purity=%.3f (%.0f s)\n",
        experts, topk, bw, (unsigned long long)seed, r.report.miou_full, r.report.miou_occ,
        r.report.utilization_entropy_normalized, r.report.purity, r.seconds);
    std::fflush(stdout);
    return cache.emplace(key, std::move(r)).first->second;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

// ---------------------------------------------------------------------------
// Check 1: finite-difference gradient suite

using Tape64 = TapeT<double>;
using Var64 = VarT<double>;

Tensor64 random64(std::vector<size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor64 t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

Tensor64 random64_off_zero(std::vector<size_t> shape, Rng& rng) {
    Tensor64 t = random64(std::move(shape), rng);
    for (double& v : t.data)
        if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
    return t;
}

// Scalarizes the op output with fixed random weights and compares tape
// gradients against central differences for every input leaf.
GradCheckReport check_op(const std::string& name, std::vector<Tensor64>& leaves, Rng& rng,
                         const std::function<Var64(Tape64&, const std::vector<Var64>&)>& build) {
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
        Var64 loss =
            out.value().numel() == 1 ? out : sum_all(mul(out, tape.alloc(weights)));
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
    return grad_check(name, [&] { return eval(nullptr); }, params, aptr, 1e-4);
}

// End-to-end finite differences on the 16x16 model with frozen noise. With
// every expert selected the routing set cannot move under a parameter nudge,
// so the loss is smooth and the dense rule is the exact Jacobian.
GradCheckReport check_model_e2e() {
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
    // Fresh zero biases put conv pre-activations of zero patches exactly on
    // the relu kink; a small jitter moves the probe to a generic point.
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
    Rng pick(915);
    return grad_check("model_e2e", [&] { return eval(nullptr); }, params, aptr, 1e-4, 1e-5,
                      6, &pick);
}

Check check_gradients() {
    Check c{1, "gradient suite (FD rel err < 1e-4, < 120 s)", false, ""};
    double t0 = now_s();
    double worst = 0.0;
    std::string worst_op;
    bool all = true;
    auto take = [&](const GradCheckReport& rep) {
        if (rep.max_rel_err > worst) {
            worst = rep.max_rel_err;
            worst_op = rep.op_name;
        }
        all = all && rep.passed;
    };

    for (uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(1000 + seed);
        {
            std::vector<Tensor64> v{random64({3, 4}, rng), random64({4, 2}, rng)};
            take(check_op("matmul", v, rng, [](Tape64&, const std::vector<Var64>& a) {
                return matmul(a[0], a[1]);
            }));
        }
        for (size_t stride : {size_t(1), size_t(2)}) {
            std::vector<Tensor64> v{random64({2, 8, 8}, rng), random64({4, 2, 3, 3}, rng),
                                    random64({4}, rng)};
            take(check_op("conv2d", v, rng, [stride](Tape64&, const std::vector<Var64>& a) {
                return conv2d(a[0], a[1], a[2], stride);
            }));
        }
        {
            std::vector<Tensor64> v{random64({5}, rng), random64({5}, rng)};
            take(check_op("add_sub_mul", v, rng, [](Tape64&, const std::vector<Var64>& a) {
                return mul(sub(add(a[0], a[1]), a[1]), a[0]);
            }));
        }
        {
            std::vector<Tensor64> v{random64_off_zero({6}, rng)};
            take(check_op("relu", v, rng, [](Tape64&, const std::vector<Var64>& a) {
                return relu(a[0]);
            }));
        }
        {
            std::vector<Tensor64> v{random64({6}, rng, -4.0, 4.0)};
            take(check_op("sigmoid", v, rng, [](Tape64&, const std::vector<Var64>& a) {
                return sigmoid(a[0]);
            }));
        }
        {
            std::vector<Tensor64> v{random64({6}, rng, -4.0, 4.0)};
            take(check_op("softplus", v, rng, [](Tape64&, const std::vector<Var64>& a) {
                return softplus(a[0]);
            }));
        }
        {
            std::vector<Tensor64> v{random64({3}, rng)};
            take(check_op("scale", v, rng, [](Tape64&, const std::vector<Var64>& a) {
                return scale(a[0], 2.5);
            }));
        }
        {
            std::vector<Tensor64> v{random64({3, 4, 4}, rng)};
            take(check_op("mean_pool_spatial", v, rng,
                          [](Tape64&, const std::vector<Var64>& a) {
                              return mean_pool_spatial(a[0]);
                          }));
        }
        {
            std::vector<Tensor64> v{random64({3}, rng), random64({4}, rng)};
            take(check_op("concat_vec", v, rng, [](Tape64&, const std::vector<Var64>& a) {
                return concat_vec(a[0], a[1]);
            }));
        }
        {
            std::vector<Tensor64> v{random64({3, 4, 4}, rng), random64({3}, rng),
                                    random64({1}, rng)};
            take(check_op("proj_spatial", v, rng, [](Tape64&, const std::vector<Var64>& a) {
                return proj_spatial(a[0], a[1], a[2]);
            }));
        }
        {
            std::vector<Tensor64> v{random64({2, 3, 3}, rng)};
            take(check_op("bilinear_upsample", v, rng,
                          [](Tape64&, const std::vector<Var64>& a) {
                              return bilinear_upsample(a[0], 4);
                          }));
        }
        {
            std::vector<Tensor64> v{random64({4, 6}, rng), random64({6}, rng),
                                    random64({4}, rng)};
            take(check_op("linear_bias", v, rng, [](Tape64&, const std::vector<Var64>& a) {
                return linear_bias(a[0], a[1], a[2]);
            }));
        }
        {
            Tensor64 target({7});
            for (double& t : target.data) t = double(rng.below(2));
            std::vector<Tensor64> v{random64({7}, rng, -3.0, 3.0)};
            take(check_op("bce_with_logits_mean", v, rng,
                          [&target](Tape64&, const std::vector<Var64>& a) {
                              return bce_with_logits_mean(a[0], target);
                          }));
        }
        {
            Tensor64 s0 = random64({5}, rng, -2.0, 2.0);
            std::vector<double> raw(s0.data.begin(), s0.data.end());
            std::vector<uint32_t> frozen = topk_indices(raw, 2);
            std::vector<Tensor64> v{s0};
            take(check_op("gate_exact_frozen", v, rng,
                          [&frozen](Tape64&, const std::vector<Var64>& a) {
                              return gate(a[0], 2, GateBackward::exact, &frozen).pi;
                          }));
        }
        {
            std::vector<Tensor64> v{random64({4}, rng, -2.0, 2.0)};
            take(check_op("gate_dense_full", v, rng,
                          [](Tape64&, const std::vector<Var64>& a) {
                              return gate(a[0], 4, GateBackward::dense).pi;
                          }));
        }
    }
    take(check_model_e2e());

    double secs = now_s() - t0;
    c.pass = all && secs < 120.0;
    c.detail = "max rel err " + fmt(worst) + " (" + worst_op + "), " + fmt(secs) + " s";
    return c;
}

// ---------------------------------------------------------------------------
// Check 2: routing property suite

std::vector<uint32_t> brute_topk(const std::vector<float>& s, size_t k) {
    std::vector<uint32_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](uint32_t a, uint32_t b) { return s[a] > s[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Check check_routing_properties() {
    Check c{2, "routing properties (>= 100 randomized cases)", false, ""};
    size_t cases = 0, failures = 0;
    std::string first_failure;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) {
            ++failures;
            if (first_failure.empty()) first_failure = what;
        }
    };

    Rng rng(2024);
    for (size_t trial = 0; trial < 120; ++trial) {
        size_t K = 1 + rng.below(8);
        size_t k = 1 + rng.below(K);
        Tensor scores({K});
        for (float& v : scores.data) v = float(rng.uniform(-3.0, 3.0));
        if (trial % 3 == 0 && K >= 2) scores[K - 1] = scores[0];  // inject a tie

        Tape tape(false);
        GateResult<float> g = gate(tape.alloc(scores), k, GateBackward::dense);
        const Tensor& pi = g.pi.value();
        ++cases;

        float sum = 0.0f;
        size_t positive = 0;
        for (size_t j = 0; j < K; ++j) {
            sum += pi[j];
            expect(pi[j] >= 0.0f, "negative gate");
            if (pi[j] > 0.0f) {
                ++positive;
                expect(std::find(g.selected.begin(), g.selected.end(), uint32_t(j)) !=
                           g.selected.end(),
                       "positive gate outside selection");
            }
        }
        expect(std::abs(sum - 1.0f) <= 1e-6f, "gate sum off unity");
        expect(positive <= k, "more than k positive gates");
        const float zero = 0.0f;
        for (size_t j = 0; j < K; ++j)
            if (std::find(g.selected.begin(), g.selected.end(), uint32_t(j)) ==
                g.selected.end())
                expect(std::memcmp(&pi[j], &zero, sizeof(float)) == 0,
                       "masked gate not bitwise zero");
        expect(g.selected == brute_topk(scores.data, k), "selection != brute-force top-k");

        // score-shift invariance of the gate values
        Tensor shifted = scores;
        for (float& v : shifted.data) v += 3.7f;
        Tape tape2(false);
        GateResult<float> g2 = gate(tape2.alloc(shifted), k, GateBackward::dense);
        expect(g2.selected == g.selected, "selection changed under score shift");
        for (size_t j = 0; j < K; ++j)
            expect(std::abs(g2.pi.value()[j] - pi[j]) <= 1e-6f,
                   "gate changed under score shift");

        // relabeling equivariance: reverse the expert order
        Tensor rev({K});
        for (size_t j = 0; j < K; ++j) rev[j] = scores[K - 1 - j];
        Tape tape3(false);
        GateResult<float> g3 = gate(tape3.alloc(rev), k, GateBackward::dense);
        std::vector<float> mapped(K, -1.0f);
        for (size_t j = 0; j < K; ++j) mapped[K - 1 - j] = g3.pi.value()[j];
        bool tie_free = true;  // ties break toward lower index, which reversal remaps
        for (size_t a = 0; a < K && tie_free; ++a)
            for (size_t b = a + 1; b < K; ++b)
                if (scores[a] == scores[b]) tie_free = false;
        if (tie_free)
            for (size_t j = 0; j < K; ++j)
                expect(std::abs(mapped[j] - pi[j]) <= 1e-6f,
                       "gate not equivariant under relabeling");
    }

    // tie-break: equal scores resolve to the lower indices
    {
        Tensor t({4}, {1.0f, 1.0f, 1.0f, 1.0f});
        Tape tape(false);
        expect(gate(tape.alloc(t), 1, GateBackward::dense).selected ==
                   std::vector<uint32_t>{0},
               "tie-break k=1");
        Tape tape2(false);
        expect(gate(tape2.alloc(t), 2, GateBackward::dense).selected ==
                   std::vector<uint32_t>{0, 1},
               "tie-break k=2");
        cases += 2;
    }

    // unselected experts stay bitwise immutable through a real optimizer step
    {
        TrainConfig cfg;
        cfg.seed = 5;
        cfg.epochs = 1;
        cfg.batch_size = 16;
        cfg.model.side = 16;
        cfg.model.num_experts = 4;
        cfg.model.top_k = 1;
        GenConfig gen;
        gen.side = 16;
        gen.seed = 21;
        gen.count = 16;
        std::vector<Scene> batch = generate_corpus(gen);

        Trainer trainer(cfg);
        // zero routing scores: ties all resolve to expert 0, the rest starve
        trainer.model().params().get("router.w").fill(0.0f);
        std::vector<Tensor> before;
        for (size_t i = 0; i < trainer.model().params().size(); ++i)
            before.push_back(trainer.model().params().value(i));
        trainer.run_epoch(batch, 1);

        for (size_t j = 1; j < 4; ++j) {
            std::string stem = "expert" + std::to_string(j);
            for (const char* part : {".fc1.w", ".fc1.b", ".fc2.w", ".fc2.b", ".bias"}) {
                const std::string name = stem + part;
                size_t idx = 0;
                for (size_t i = 0; i < trainer.model().params().size(); ++i)
                    if (trainer.model().params().name(i) == name) idx = i;
                const Tensor& now = trainer.model().params().get(name);
                expect(std::memcmp(now.data.data(), before[idx].data.data(),
                                   now.numel() * sizeof(float)) == 0,
                       "starved expert parameter moved: " + name);
                ++cases;
            }
        }
        // starved router rows receive no gradient either
        size_t widx = 0;
        for (size_t i = 0; i < trainer.model().params().size(); ++i)
            if (trainer.model().params().name(i) == "router.w") widx = i;
        const Tensor& w = trainer.model().params().get("router.w");
        size_t d = w.shape[1];
        expect(std::memcmp(&w[d], &before[widx][d], 3 * d * sizeof(float)) == 0,
               "starved router row moved");
        expect(std::memcmp(&w[0], &before[widx][0], d * sizeof(float)) != 0,
               "selected router row failed to move");
        cases += 2;
    }

    c.pass = failures == 0 && cases >= 100;
    c.detail = std::to_string(cases) + " cases, " + std::to_string(failures) + " failures" +
               (first_failure.empty() ? "" : " (first: " + first_failure + ")");
    return c;
}

// ---------------------------------------------------------------------------
// Check 3: CV^2 oracle suite

Check check_cv2_oracles() {
    Check c{3, "CV^2 oracles (closed form to 1e-6, zero iff balanced)", false, ""};
    struct OracleCase {
        std::vector<double> imp;
        double want;
    };
    const std::vector<OracleCase> table{
        {{2, 2, 2, 2}, 0.0}, {{4, 0, 0, 0}, 3.0}, {{3, 1}, 0.25}};
    double worst = 0.0;
    for (const OracleCase& t : table) {
        double got = cv2_loss<double>(t.imp).loss;
        worst = std::max(worst, std::abs(got - t.want));
    }

    bool iff_ok = true;
    Rng rng(3030);
    for (size_t trial = 0; trial < 50; ++trial) {
        size_t K = 2 + rng.below(6);
        std::vector<double> imp(K);
        bool balanced = trial % 2 == 0;
        double base = rng.uniform(0.5, 4.0);
        for (size_t j = 0; j < K; ++j)
            imp[j] = balanced ? base : rng.uniform(0.1, 4.0);
        if (!balanced) imp[0] += 1.0;  // guarantee imbalance
        double loss = cv2_loss<double>(imp).loss;
        if (balanced && std::abs(loss) > 1e-12) iff_ok = false;
        if (!balanced && loss <= 0.0) iff_ok = false;
    }

    c.pass = worst <= 1e-6 && iff_ok;
    c.detail = "max oracle err " + fmt(worst) + ", zero-iff-balanced " +
               (iff_ok ? "holds" : "violated");
    return c;
}

// ---------------------------------------------------------------------------
// Check 4: metric oracle suite

Check check_metric_oracles() {
    Check c{4, "metric oracles (IoU brute force, occluded-only exclusion)", false, ""};
    Rng rng(4040);
    bool iou_ok = true;
    for (size_t trial = 0; trial < 50; ++trial) {
        std::vector<uint8_t> a(64), b(64);
        for (size_t i = 0; i < 64; ++i) {
            a[i] = uint8_t(rng.below(2));
            b[i] = uint8_t(rng.below(2));
        }
        size_t inter = 0, uni = 0;
        for (size_t i = 0; i < 64; ++i) {
            inter += (a[i] && b[i]) ? 1 : 0;
            uni += (a[i] || b[i]) ? 1 : 0;
        }
        auto got = iou(a, b);
        if (uni == 0) {
            if (got.has_value()) iou_ok = false;
        } else if (!got || *got != double(inter) / double(uni)) {
            iou_ok = false;
        }
    }

    // A corpus with unoccluded members: they must drop out of miou_occ.
    GenConfig gen;
    gen.side = 16;
    gen.seed = 31;
    gen.count = 40;
    gen.unoccluded_prob = 0.5;
    std::vector<Scene> scenes = generate_corpus(gen);
    size_t occluded = 0;
    for (const Scene& s : scenes) {
        bool any = false;
        for (size_t i = 0; i < s.amodal.size(); ++i)
            if (s.amodal[i] && !s.visible[i]) any = true;
        if (any) ++occluded;
    }
    ModelConfig mc;
    mc.side = 16;
    mc.num_experts = 2;
    Model model(mc);
    Rng mrng(7);
    model.init(mrng);
    EvalReport rep = evaluate(model, scenes);
    bool excl_ok = occluded < scenes.size() && rep.n_occluded_samples == occluded;

    c.pass = iou_ok && excl_ok;
    c.detail = std::string("IoU brute force ") + (iou_ok ? "exact" : "MISMATCH") + "; " +
               std::to_string(rep.n_occluded_samples) + "/" + std::to_string(scenes.size()) +
               " samples counted for miou_occ";
    return c;
}

// ---------------------------------------------------------------------------
// Checks 5-8: trend runs

Check check_expert_count_trend() {
    Check c{5, "expert-count trend (K=4 over K=1 by >= 0.01 miou_occ, < 3600 s)", false, ""};
    double t0 = now_s();
    (void)corpus();
    std::vector<double> occ1, occ4;
    for (uint64_t s : kSeeds) occ1.push_back(trend_run(1, 1, 1.0, s).report.miou_occ);
    for (uint64_t s : kSeeds) occ4.push_back(trend_run(4, 1, 1.0, s).report.miou_occ);
    double secs = now_s() - t0;
    double m1 = mean_of(occ1), m4 = mean_of(occ4);
    c.pass = (m4 - m1 >= 0.010) && secs < 3600.0;
    c.detail = "mean miou_occ K=1 " + fmt(m1) + " vs K=4 " + fmt(m4) + " (delta " +
               fmt(m4 - m1) + "), " + fmt(secs) + " s";
    return c;
}

Check check_balance_trend() {
    Check c{6, "balance trend (bw=1 entropy >= 0.8 in 2/3 seeds; bw=0 collapses)", false, ""};
    size_t high = 0;
    std::vector<double> full_on, occ_on;
    for (uint64_t s : kSeeds) {
        const RunResult& r = trend_run(4, 1, 1.0, s);
        if (r.report.utilization_entropy_normalized >= 0.8) ++high;
        full_on.push_back(r.report.miou_full);
        occ_on.push_back(r.report.miou_occ);
    }
    const RunResult& off = trend_run(4, 1, 0.0, 1);
    bool collapse = off.report.utilization_entropy_normalized < 0.5;
    c.pass = high >= 2 && collapse;
    c.detail = std::to_string(high) + "/3 seeds at entropy >= 0.8; bw=0 entropy " +
               fmt(off.report.utilization_entropy_normalized) + "; miou full/occ bw=1 " +
               fmt(mean_of(full_on)) + "/" + fmt(mean_of(occ_on)) + ", bw=0 " +
               fmt(off.report.miou_full) + "/" + fmt(off.report.miou_occ);
    return c;
}

Check check_topk_trend() {
    Check c{7, "top-k trend (k=1 within 0.005 miou_full of best)", false, ""};
    std::map<size_t, std::vector<double>> full;
    for (size_t k : {size_t(1), size_t(2), size_t(4)})
        for (uint64_t s : kSeeds) full[k].push_back(trend_run(4, k, 1.0, s).report.miou_full);

    std::printf("top-k summary (K=4, %zu seeds):\n", kSeeds.size());
    double best = 0.0;
    for (auto& [k, v] : full) {
        double m = mean_of(v);
        best = std::max(best, m);
        double sq = 0.0;
        for (double x : v) sq += (x - m) * (x - m);
        std::printf("  k=%zu: miou_full %.4f +- %.4f\n", k, m,
                    std::sqrt(sq / double(v.size())));
    }
    std::fflush(stdout);
    double m1 = mean_of(full[1]);
    c.pass = m1 >= best - 0.005;
    c.detail = "k=1 " + fmt(m1) + " vs best " + fmt(best) + " (gap " + fmt(best - m1) + ")";
    return c;
}

Check check_purity() {
    Check c{8, "routing purity (>= 0.40 mean over seeds, chance 0.25)", false, ""};
    std::vector<double> purity;
    for (uint64_t s : kSeeds) purity.push_back(trend_run(4, 1, 1.0, s).report.purity);
    double m = mean_of(purity);
    c.pass = m >= 0.40;
    c.detail = "mean purity " + fmt(m) + " (seeds: " + fmt(purity[0]) + ", " +
               fmt(purity[1]) + ", " + fmt(purity[2]) + ")";
    return c;
}

// ---------------------------------------------------------------------------
// Check 9: reproducibility

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Check check_reproducibility(const fs::path& work) {
    Check c{9, "bitwise reproducibility (datasets, checkpoints, reports, CSVs)", false, ""};

    GenConfig gen;
    gen.side = 16;
    gen.seed = 11;
    gen.count = 200;
    for (const char* name : {"a.smds", "b.smds"}) {
        std::vector<Scene> scenes = generate_corpus(gen);
        write_dataset(scenes, (work / name).string(), gen.side, gen.side);
    }
    bool data_ok = slurp(work / "a.smds") == slurp(work / "b.smds");

    GenConfig tgen;
    tgen.side = 16;
    tgen.seed = 12;
    tgen.count = 64;
    std::vector<Scene> train_set = generate_corpus(tgen);
    bool report_ok = true, csv_ok = true;
    for (const char* name : {"r1.smck", "r2.smck"}) {
        TrainConfig cfg;
        cfg.seed = 9;
        cfg.epochs = 2;
        cfg.model.side = 16;
        cfg.model.num_experts = 4;
        cfg.model.top_k = 1;
        Trainer trainer(cfg);
        trainer.train(train_set, train_set);
        save_checkpoint(trainer.checkpoint(), (work / name).string());
        std::string rep = eval_report_json(evaluate(trainer.model(), train_set)).dump();
        std::string csv = routing_table(trainer.model(), train_set);
        fs::path rep_p = work / (std::string(name) + ".json");
        fs::path csv_p = work / (std::string(name) + ".csv");
        std::ofstream(rep_p, std::ios::binary) << rep;
        std::ofstream(csv_p, std::ios::binary) << csv;
    }
    bool ckpt_ok = slurp(work / "r1.smck") == slurp(work / "r2.smck");
    report_ok = slurp(work / "r1.smck.json") == slurp(work / "r2.smck.json");
    csv_ok = slurp(work / "r1.smck.csv") == slurp(work / "r2.smck.csv");

    c.pass = data_ok && ckpt_ok && report_ok && csv_ok;
    c.detail = std::string("dataset ") + (data_ok ? "ok" : "DIFFERS") + ", checkpoint " +
               (ckpt_ok ? "ok" : "DIFFERS") + ", report " + (report_ok ? "ok" : "DIFFERS") +
               ", csv " + (csv_ok ? "ok" : "DIFFERS");
    return c;
}

// ---------------------------------------------------------------------------
// Check 10: compute sparsity

Check check_compute_sparsity() {
    Check c{10, "compute sparsity (expert evaluations == samples x k)", false, ""};
    GenConfig gen;
    gen.side = 16;
    gen.seed = 13;
    gen.count = 48;
    std::vector<Scene> scenes = generate_corpus(gen);

    std::string counts;
    bool ok = true;
    for (size_t k : {size_t(1), size_t(2)}) {
        TrainConfig cfg;
        cfg.seed = 3;
        cfg.epochs = 1;
        cfg.model.side = 16;
        cfg.model.num_experts = 4;
        cfg.model.top_k = k;
        Trainer trainer(cfg);
        trainer.model().reset_expert_evaluations();
        trainer.run_epoch(scenes, 1);
        size_t got = trainer.model().expert_evaluations();
        size_t want = scenes.size() * k;
        ok = ok && got == want;
        counts += "k=" + std::to_string(k) + ": " + std::to_string(got) + "/" +
                  std::to_string(want) + " ";
    }
    c.pass = ok;
    c.detail = counts + "(K=4 would be " + std::to_string(scenes.size() * 4) + ")";
    return c;
}

}  // namespace

int main() {
    fs::path work = "acceptance_work";
    fs::create_directories(work);

    std::vector<Check> checks;
    try {
        checks.push_back(check_gradients());
        checks.push_back(check_routing_properties());
        checks.push_back(check_cv2_oracles());
        checks.push_back(check_metric_oracles());
        checks.push_back(check_reproducibility(work));
        checks.push_back(check_compute_sparsity());
        checks.push_back(check_expert_count_trend());
        checks.push_back(check_balance_trend());
        checks.push_back(check_topk_trend());
        checks.push_back(check_purity());
    } catch (const std::exception& e) {
        std::printf("aborted: %s\n", e.what());
        return 1;
    }

    std::sort(checks.begin(), checks.end(),
              [](const Check& a, const Check& b) { return a.id < b.id; });
    std::printf("\n==== acceptance summary ====\n");
    int failed = 0;
    for (const Check& c : checks) {
        std::printf("%s %2d %s — %s\n", c.pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                    c.detail.c_str());
        if (!c.pass) ++failed;
    }
    std::printf("%d/%zu checks passed\n", int(checks.size()) - failed, checks.size());
    return failed == 0 ? 0 : 1;
}
