// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "shapemoe/metrics.hpp"
#include "shapemoe/trainer.hpp"

namespace shapemoe {

struct SweepRun {
    double value = 0.0;
    uint64_t seed = 0;
    bool ok = false;
    std::string error;
    int error_code = 0;
    double miou_full = 0.0;
    double miou_occ = 0.0;
    double entropy = 0.0;
    std::vector<EpochStats> epochs;
};

struct SweepResult {
    std::vector<SweepRun> runs;
    std::string summary_csv;
    bool any_failure = false;
};

inline TrainConfig sweep_child_config(const TrainConfig& base, const std::string& axis,
                                      double value, uint64_t seed) {
    TrainConfig c = base;
    c.seed = seed;
    if (axis == "experts")
        c.model.num_experts = size_t(value);
    else if (axis == "topk")
        c.model.top_k = size_t(value);
    else if (axis == "balance")
        c.balance_weight = value;
    else
        throw ConfigError("unknown sweep axis: " + axis);
    return c;
}

// Trains one run per (value, seed) combination and aggregates seed-averaged
// metrics per value, mirroring an ablation-table row layout. Child failures
// are recorded, never silently dropped.
inline SweepResult run_sweep(const std::string& axis, const std::vector<double>& values,
                             const std::vector<uint64_t>& seeds, const TrainConfig& base,
                             const std::vector<Scene>& train_set,
                             const std::vector<Scene>& val_set,
                             std::ostream* progress = nullptr) {
    if (values.empty()) throw ConfigError("sweep: no axis values given");
    if (seeds.empty()) throw ConfigError("sweep: no seeds given");
    SweepResult res;
    for (double value : values) {
        for (uint64_t seed : seeds) {
            SweepRun run;
            run.value = value;
            run.seed = seed;
            if (progress)
                *progress << "sweep " << axis << "=" << fmt_g(value) << " seed=" << seed
                          << "\n"
                          << std::flush;
            try {
                Trainer t(sweep_child_config(base, axis, value, seed));
                run.epochs = t.train(train_set, val_set);
                EvalReport rep = evaluate(t.model(), val_set);
                run.miou_full = rep.miou_full;
                run.miou_occ = rep.miou_occ;
                run.entropy = rep.utilization_entropy_normalized;
                run.ok = true;
            } catch (const Error& e) {
                run.error = e.what();
                run.error_code = exit_code_for(e);
                res.any_failure = true;
            }
            res.runs.push_back(std::move(run));
        }
    }

    std::string csv =
        "axis,value,seeds,failed,miou_full_mean,miou_full_std,miou_occ_mean,"
        "miou_occ_std,entropy_mean\n";
    for (double value : values) {
        std::vector<const SweepRun*> ok;
        size_t failed = 0;
        for (const SweepRun& r : res.runs)
            if (r.value == value) (r.ok ? (void)ok.push_back(&r) : (void)++failed);
        auto stat = [&](auto field) {
            double mean = 0.0, sq = 0.0;
            for (const SweepRun* r : ok) mean += field(*r);
            if (!ok.empty()) mean /= double(ok.size());
            for (const SweepRun* r : ok) sq += (field(*r) - mean) * (field(*r) - mean);
            double sd = ok.empty() ? 0.0 : std::sqrt(sq / double(ok.size()));
            return std::pair<double, double>{mean, sd};
        };
        auto [fm, fs] = stat([](const SweepRun& r) { return r.miou_full; });
        auto [om, os] = stat([](const SweepRun& r) { return r.miou_occ; });
        auto [em, es] = stat([](const SweepRun& r) { return r.entropy; });
        (void)es;
        csv += axis + "," + fmt_g(value) + "," + std::to_string(ok.size()) + "," +
               std::to_string(failed) + "," + fmt_g(fm) + "," + fmt_g(fs) + "," +
               fmt_g(om) + "," + fmt_g(os) + "," + fmt_g(em) + "\n";
    }
    res.summary_csv = std::move(csv);
    return res;
}

}  // namespace shapemoe
