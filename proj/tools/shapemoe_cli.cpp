// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: dataset generation, training, evaluation, routing
// inspection, and ablation sweeps over a shared checkpoint/dataset format.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "shapemoe/shapemoe.hpp"

namespace sm = shapemoe;

namespace {

int run_guarded(const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const sm::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return sm::exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

nlohmann::json gen_config_json(const sm::GenConfig& c) {
    return nlohmann::json{{"seed", c.seed},
                          {"count", c.count},
                          {"side", c.side},
                          {"occluder_min", c.occluder_min},
                          {"occluder_max", c.occluder_max},
                          {"visible_lo", c.visible_lo},
                          {"visible_hi", c.visible_hi},
                          {"unoccluded_prob", c.unoccluded_prob},
                          {"noise_sigma", c.noise_sigma}};
}

std::vector<size_t> family_counts(const std::vector<sm::Scene>& scenes) {
    std::vector<size_t> hist(sm::kNumFamilies, 0);
    for (const sm::Scene& s : scenes) ++hist[s.family];
    return hist;
}

std::vector<sm::Scene> load_scenes(const std::string& path) {
    return sm::read_dataset(path);
}

size_t dataset_side(const std::vector<sm::Scene>& scenes, const std::string& what) {
    if (scenes.empty()) throw sm::ConfigError(what + ": dataset is empty");
    return scenes[0].h;
}

int cmd_gen(const sm::GenConfig& cfg, const std::string& out) {
    cfg.validate();
    std::vector<sm::Scene> scenes = sm::generate_corpus(cfg);
    sm::write_dataset(scenes, out, cfg.side, cfg.side);

    std::vector<size_t> hist = family_counts(scenes);
    size_t occluded_nonempty = 0;
    for (const sm::Scene& s : scenes) {
        bool any = false;
        for (size_t i = 0; i < s.amodal.size(); ++i)
            if (s.amodal[i] && !s.visible[i]) any = true;
        if (any) ++occluded_nonempty;
    }

    nlohmann::json manifest{{"config", gen_config_json(cfg)},
                            {"count", scenes.size()},
                            {"family_histogram", hist},
                            {"occluded_nonempty", occluded_nonempty}};
    std::ofstream mf(out + ".json", std::ios::binary);
    if (!mf) throw sm::FormatError("cannot open " + out + ".json for writing");
    mf << manifest.dump(2) << "\n";

    std::cout << "wrote " << scenes.size() << " records to " << out << "\n";
    std::cout << "family histogram:";
    for (size_t f = 0; f < hist.size(); ++f)
        std::cout << " " << sm::family_name(uint8_t(f)) << "=" << hist[f];
    std::cout << "\n";
    return 0;
}

int cmd_train(sm::TrainConfig cfg, const std::string& data_path,
              const std::string& val_path, const std::string& out,
              std::string log_path) {
    std::vector<sm::Scene> train_set = load_scenes(data_path);
    std::vector<sm::Scene> val_set = load_scenes(val_path);
    cfg.model.side = dataset_side(train_set, "train");
    cfg.validate();

    if (log_path.empty()) log_path = out + ".log.jsonl";
    std::ofstream log(log_path, std::ios::binary);
    if (!log) throw sm::FormatError("cannot open " + log_path + " for writing");

    sm::Trainer trainer(cfg);
    std::vector<sm::EpochStats> stats = trainer.train(train_set, val_set, &log);
    sm::save_checkpoint(trainer.checkpoint(), out);

    if (!stats.empty()) {
        const sm::EpochStats& last = stats.back();
        std::cout << "epoch " << last.epoch << ": loss=" << sm::fmt_g(last.train_loss)
                  << " val_miou_full=" << sm::fmt_g(last.val_miou_full)
                  << " val_miou_occ=" << sm::fmt_g(last.val_miou_occ)
                  << " val_entropy=" << sm::fmt_g(last.val_entropy) << "\n";
    }
    std::cout << "wrote checkpoint to " << out << " (step " << trainer.step() << ")\n";
    std::cout << "wrote metrics log to " << log_path << "\n";
    return 0;
}

struct EvalArgs {
    std::string ckpt;
    std::string data;
    bool stochastic = false;
    uint64_t seed = 1;
};

sm::Model load_model_for(const EvalArgs& a, std::vector<sm::Scene>& scenes) {
    sm::CheckpointData ck = sm::load_checkpoint(a.ckpt);
    sm::Model model = sm::model_from_checkpoint(ck);
    scenes = load_scenes(a.data);
    size_t side = dataset_side(scenes, "eval");
    if (side != model.config().side)
        throw sm::CompatError("checkpoint side " + std::to_string(model.config().side) +
                              " does not match dataset side " + std::to_string(side));
    return model;
}

int cmd_eval(const EvalArgs& a, const std::string& report_path) {
    std::vector<sm::Scene> scenes;
    sm::Model model = load_model_for(a, scenes);
    sm::Rng rng(a.seed);
    sm::EvalReport rep = sm::evaluate(model, scenes, a.stochastic ? &rng : nullptr);

    std::ofstream rf(report_path, std::ios::binary);
    if (!rf) throw sm::FormatError("cannot open " + report_path + " for writing");
    rf << sm::eval_report_json(rep).dump(2) << "\n";

    std::cout << "miou_full=" << sm::fmt_g(rep.miou_full)
              << " miou_occ=" << sm::fmt_g(rep.miou_occ)
              << " entropy=" << sm::fmt_g(rep.utilization_entropy_normalized)
              << " purity=" << sm::fmt_g(rep.purity) << " n=" << rep.n_samples << "\n";
    std::cout << "wrote report to " << report_path << "\n";
    return 0;
}

int cmd_inspect(const EvalArgs& a, const std::string& csv_path) {
    std::vector<sm::Scene> scenes;
    sm::Model model = load_model_for(a, scenes);
    sm::Rng rng(a.seed);
    std::string csv = sm::routing_table(model, scenes, a.stochastic ? &rng : nullptr);

    std::ofstream cf(csv_path, std::ios::binary);
    if (!cf) throw sm::FormatError("cannot open " + csv_path + " for writing");
    cf << csv;
    std::cout << "wrote routing table for " << scenes.size() << " samples to " << csv_path
              << "\n";
    return 0;
}

int cmd_sweep(sm::TrainConfig base, const std::string& axis,
              const std::vector<double>& values, const std::vector<uint64_t>& seeds,
              const std::string& data_path, const std::string& val_path,
              const std::string& out_dir) {
    if (axis != "experts" && axis != "topk" && axis != "balance")
        throw sm::ConfigError("sweep axis must be one of experts, topk, balance");
    if (axis != "balance")
        for (double v : values)
            if (v < 1.0 || v != double(size_t(v)))
                throw sm::ConfigError("axis " + axis +
                                      " needs positive integer values, got " +
                                      sm::fmt_g(v));

    std::vector<sm::Scene> train_set = load_scenes(data_path);
    std::vector<sm::Scene> val_set = load_scenes(val_path);
    base.model.side = dataset_side(train_set, "sweep");

    std::filesystem::create_directories(out_dir);
    sm::SweepResult res =
        sm::run_sweep(axis, values, seeds, base, train_set, val_set, &std::cout);

    for (const sm::SweepRun& run : res.runs) {
        std::string stem = out_dir + "/run_" + axis + "_" + sm::fmt_g(run.value) +
                           "_seed" + std::to_string(run.seed);
        std::ofstream log(stem + ".jsonl", std::ios::binary);
        for (const sm::EpochStats& s : run.epochs)
            log << sm::epoch_stats_json(s).dump() << "\n";
        if (run.ok)
            std::cout << "  ok: miou_occ=" << sm::fmt_g(run.miou_occ)
                      << " entropy=" << sm::fmt_g(run.entropy) << "\n";
        else
            std::cout << "  FAILED: " << run.error << "\n";
    }

    std::string summary_path = out_dir + "/summary.csv";
    std::ofstream sf(summary_path, std::ios::binary);
    if (!sf) throw sm::FormatError("cannot open " + summary_path + " for writing");
    sf << res.summary_csv;
    std::cout << res.summary_csv;
    std::cout << "wrote summary to " << summary_path << "\n";

    if (res.any_failure)
        for (const sm::SweepRun& run : res.runs)
            if (!run.ok) return run.error_code;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"shape-conditioned mixture-of-experts amodal segmentation"};
    app.set_config("--config", "", "read options from an INI/TOML file");
    app.require_subcommand(1);

    // gen
    sm::GenConfig gen_cfg;
    std::string gen_out;
    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic occlusion dataset");
    gen->add_option("--seed", gen_cfg.seed, "generator seed");
    gen->add_option("--count", gen_cfg.count, "number of records")->required();
    gen->add_option("--size", gen_cfg.side, "image side length");
    gen->add_option("--unoccluded-prob", gen_cfg.unoccluded_prob,
                    "probability of an unoccluded sample");
    gen->add_option("--noise-sigma", gen_cfg.noise_sigma, "additive noise level");
    gen->add_option("--out", gen_out, "output dataset path")->required();

    // shared train-flag block (train + sweep)
    auto add_train_flags = [](CLI::App* c, sm::TrainConfig& cfg, std::string& data,
                              std::string& val) {
        c->add_option("--data", data, "training dataset path")->required();
        c->add_option("--val", val, "validation dataset path")->required();
        c->add_option("--experts", cfg.model.num_experts, "number of experts");
        c->add_option("--topk", cfg.model.top_k, "experts evaluated per sample");
        c->add_option("--epochs", cfg.epochs, "training epochs");
        c->add_option("--batch", cfg.batch_size, "batch size");
        c->add_option("--lr", cfg.lr, "Adam learning rate");
        c->add_option("--balance-weight", cfg.balance_weight,
                      "utilization-balance loss weight");
        c->add_option("--seed", cfg.seed, "training seed");
        c->add_option_function<std::string>(
             "--gate-backward",
             [&cfg](const std::string& v) {
                 cfg.gate_backward =
                     v == "exact" ? sm::GateBackward::exact : sm::GateBackward::dense;
             },
             "gate gradient mode")
            ->check(CLI::IsMember({"dense", "exact"}));
    };

    sm::TrainConfig train_cfg;
    std::string train_data, train_val, train_out, train_log;
    CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
    add_train_flags(train, train_cfg, train_data, train_val);
    train->add_option("--out", train_out, "checkpoint output path")->required();
    train->add_option("--log", train_log, "metrics log path (default <out>.log.jsonl)");

    // eval / inspect
    EvalArgs eval_args;
    std::string report_path;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--ckpt", eval_args.ckpt, "checkpoint path")->required();
    eval->add_option("--data", eval_args.data, "dataset path")->required();
    eval->add_option("--report", report_path, "JSON report output path")->required();
    eval->add_flag("--stochastic-routing", eval_args.stochastic,
                   "sample the latent instead of using its mean");
    eval->add_option("--seed", eval_args.seed, "seed for stochastic routing");

    EvalArgs inspect_args;
    std::string csv_path;
    CLI::App* inspect =
        app.add_subcommand("inspect", "dump per-sample routing decisions as CSV");
    inspect->add_option("--ckpt", inspect_args.ckpt, "checkpoint path")->required();
    inspect->add_option("--data", inspect_args.data, "dataset path")->required();
    inspect->add_option("--csv", csv_path, "CSV output path")->required();
    inspect->add_flag("--stochastic-routing", inspect_args.stochastic,
                      "sample the latent instead of using its mean");
    inspect->add_option("--seed", inspect_args.seed, "seed for stochastic routing");

    // sweep
    sm::TrainConfig sweep_cfg;
    std::string sweep_data, sweep_val, sweep_axis, sweep_out;
    std::vector<double> sweep_values;
    std::vector<uint64_t> sweep_seeds{1, 2, 3};
    CLI::App* sweep = app.add_subcommand("sweep", "train across an axis of settings");
    add_train_flags(sweep, sweep_cfg, sweep_data, sweep_val);
    sweep->add_option("--axis", sweep_axis, "experts | topk | balance")->required();
    sweep->add_option("--values", sweep_values, "comma-separated axis values")
        ->required()
        ->delimiter(',');
    sweep->add_option("--seeds", sweep_seeds, "comma-separated seeds")->delimiter(',');
    sweep->add_option("--out", sweep_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    if (gen->parsed()) return run_guarded([&] { return cmd_gen(gen_cfg, gen_out); });
    if (train->parsed())
        return run_guarded(
            [&] { return cmd_train(train_cfg, train_data, train_val, train_out, train_log); });
    if (eval->parsed()) return run_guarded([&] { return cmd_eval(eval_args, report_path); });
    if (inspect->parsed())
        return run_guarded([&] { return cmd_inspect(inspect_args, csv_path); });
    if (sweep->parsed())
        return run_guarded([&] {
            return cmd_sweep(sweep_cfg, sweep_axis, sweep_values, sweep_seeds, sweep_data,
                             sweep_val, sweep_out);
        });
    return 1;
}
