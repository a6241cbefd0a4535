// SPDX-License-Identifier: Apache-2.0
//
// Rough single-core throughput probe: raw GEMM rates at conv-shaped sizes,
// then wall time per training step and per evaluation sample at the default
// model size. Used to budget epoch counts for the long-running tests.

#include <chrono>
#include <cstdio>
#include <vector>

#include "shapemoe/shapemoe.hpp"

using namespace shapemoe;
using clk = std::chrono::steady_clock;

static double seconds_since(clk::time_point t0) {
    return std::chrono::duration<double>(clk::now() - t0).count();
}

static void bench_gemm_shape(size_t m, size_t n, size_t k) {
    std::vector<float> a(m * k), b(k * n), c(m * n);
    Rng rng(7);
    for (float& v : a) v = float(rng.uniform(-1.0, 1.0));
    for (float& v : b) v = float(rng.uniform(-1.0, 1.0));
    // warm up, then time enough reps for a stable read
    gemm_nn(m, n, k, a.data(), b.data(), c.data());
    size_t reps = 1;
    double el = 0.0;
    for (;;) {
        auto t0 = clk::now();
        for (size_t r = 0; r < reps; ++r) gemm_nn(m, n, k, a.data(), b.data(), c.data());
        el = seconds_since(t0);
        if (el > 0.25) break;
        reps *= 4;
    }
    double flops = 2.0 * double(m) * double(n) * double(k) * double(reps);
    std::printf("gemm %4zux%-4zu k=%-4zu  %7.2f GFLOP/s\n", m, n, k, flops / el / 1e9);
}

int main() {
    bench_gemm_shape(32, 1024, 18);    // first trunk conv
    bench_gemm_shape(64, 256, 288);    // second trunk conv
    bench_gemm_shape(64, 256, 576);    // refinement convs
    bench_gemm_shape(256, 256, 256);   // square reference

    GenConfig gc;
    gc.seed = 11;
    gc.count = 64;
    std::vector<Scene> scenes = generate_corpus(gc);
    std::vector<Scene> val(scenes.begin(), scenes.begin() + 16);

    TrainConfig tc;
    tc.seed = 3;
    tc.epochs = 1;
    tc.batch_size = 16;
    tc.model.top_k = 1;
    Trainer tr(tc);
    auto t0 = clk::now();
    tr.train(scenes, val);
    double el = seconds_since(t0);

    Model& m = tr.model();
    auto t1 = clk::now();
    EvalReport rep = evaluate(m, scenes);
    double ev = seconds_since(t1);
    std::printf("train epoch (64 samples, k=1): %.3f s  -> %.1f ms/sample-step\n", el,
                el / 64.0 * 1e3);
    std::printf("eval: %.3f s -> %.1f ms/sample (miou_full=%.3f)\n", ev,
                ev / double(scenes.size()) * 1e3, rep.miou_full);
    return 0;
}
