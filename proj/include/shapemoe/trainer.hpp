// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "shapemoe/checkpoint.hpp"
#include "shapemoe/metrics.hpp"
#include "shapemoe/model.hpp"

namespace shapemoe {

struct EpochStats {
    size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_ce = 0.0;
    double train_cv2 = 0.0;
    double val_miou_full = 0.0;
    double val_miou_occ = 0.0;
    std::vector<double> val_utilization;
    double val_entropy = 0.0;
};

inline nlohmann::json epoch_stats_json(const EpochStats& s) {
    return nlohmann::json{{"epoch", s.epoch},
                          {"train_loss", s.train_loss},
                          {"train_ce", s.train_ce},
                          {"train_cv2", s.train_cv2},
                          {"val_miou_full", s.val_miou_full},
                          {"val_miou_occ", s.val_miou_occ},
                          {"val_utilization", s.val_utilization},
                          {"val_entropy", s.val_entropy}};
}

// Seeded mini-batch training with Adam. Everything downstream of the config
// seed is deterministic: initialization, shuffling, noise draws, and the
// fixed-order gradient reduction.
class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg)
        : cfg_(cfg), model_(cfg.model), rng_(cfg.seed) {
        cfg_.validate();
        model_.init(rng_);
        const ParamSet& ps = model_.params();
        for (size_t i = 0; i < ps.size(); ++i) {
            m_.emplace_back(ps.value(i).shape);
            v_.emplace_back(ps.value(i).shape);
            grads_.emplace_back(ps.value(i).shape);
        }
    }

    const TrainConfig& config() const { return cfg_; }
    Model& model() { return model_; }
    const Model& model() const { return model_; }
    uint64_t step() const { return step_; }

    // Runs the epochs remaining under cfg.epochs (a restored trainer picks up
    // where its checkpoint left off). Emits one JSON line per epoch to `log`.
    std::vector<EpochStats> train(const std::vector<Scene>& train_set,
                                  const std::vector<Scene>& val_set,
                                  std::ostream* log = nullptr) {
        if (train_set.empty() || val_set.empty())
            throw ConfigError("train: datasets must be non-empty");
        for (const Scene* sc : {&train_set[0], &val_set[0]})
            if (sc->h != cfg_.model.side || sc->w != cfg_.model.side)
                throw ConfigError("train: dataset side " + std::to_string(sc->h) +
                                  " does not match model side " +
                                  std::to_string(cfg_.model.side));
        size_t spe = steps_per_epoch(train_set.size());
        size_t done = size_t(step_) / spe;
        std::vector<EpochStats> out;
        for (size_t e = done; e < cfg_.epochs; ++e) {
            EpochStats st = run_epoch(train_set, e + 1);
            EvalReport rep = evaluate(model_, val_set);
            st.val_miou_full = rep.miou_full;
            st.val_miou_occ = rep.miou_occ;
            st.val_utilization = rep.utilization;
            st.val_entropy = rep.utilization_entropy_normalized;
            if (log) *log << epoch_stats_json(st).dump() << "\n" << std::flush;
            out.push_back(std::move(st));
        }
        return out;
    }

    // One seeded pass over the training set; exposed so tests can drive
    // training without validation overhead.
    EpochStats run_epoch(const std::vector<Scene>& train_set, size_t epoch_number) {
        size_t n = train_set.size();
        std::vector<size_t> perm(n);
        for (size_t i = 0; i < n; ++i) perm[i] = i;
        for (size_t i = n; i-- > 1;) {
            size_t j = size_t(rng_.below(i + 1));
            std::swap(perm[i], perm[j]);
        }
        double ce_sum = 0.0, cv2_sum = 0.0;
        for (size_t start = 0; start < n; start += cfg_.batch_size) {
            size_t stop = std::min(n, start + cfg_.batch_size);
            std::vector<const Scene*> batch;
            batch.reserve(stop - start);
            for (size_t i = start; i < stop; ++i) batch.push_back(&train_set[perm[i]]);
            auto [mean_ce, cv2] = train_batch(batch);
            ce_sum += mean_ce * double(batch.size());
            cv2_sum += cv2 * double(batch.size());
        }
        EpochStats st;
        st.epoch = epoch_number;
        st.train_ce = ce_sum / double(n);
        st.train_cv2 = cv2_sum / double(n);
        st.train_loss = st.train_ce + cfg_.balance_weight * st.train_cv2;
        return st;
    }

    CheckpointData checkpoint() const {
        CheckpointData ck;
        ck.config = cfg_;
        ck.step = step_;
        ck.rng_state = rng_.state();
        ck.rng_have_spare = rng_.have_spare();
        ck.rng_spare_bits = std::bit_cast<uint64_t>(rng_.spare());
        const ParamSet& ps = model_.params();
        for (size_t i = 0; i < ps.size(); ++i)
            ck.tensors.emplace_back(ps.name(i), ps.value(i));
        for (size_t i = 0; i < ps.size(); ++i)
            ck.tensors.emplace_back("adam.m." + ps.name(i), m_[i]);
        for (size_t i = 0; i < ps.size(); ++i)
            ck.tensors.emplace_back("adam.v." + ps.name(i), v_[i]);
        return ck;
    }

    void restore(const CheckpointData& ck) {
        const ModelConfig& a = ck.config.model;
        const ModelConfig& b = cfg_.model;
        if (a.side != b.side || a.embed_dim != b.embed_dim ||
            a.latent_dim != b.latent_dim || a.num_experts != b.num_experts ||
            a.top_k != b.top_k || a.trunk_c1 != b.trunk_c1 || a.feat_c != b.feat_c ||
            a.embed_c1 != b.embed_c1 || a.mlp_hidden != b.mlp_hidden ||
            a.expert_hidden != b.expert_hidden)
            throw CompatError("checkpoint model configuration does not match the trainer's");
        apply_params(ck, model_);
        const ParamSet& ps = model_.params();
        for (size_t i = 0; i < ps.size(); ++i) {
            const Tensor* tm = ck.find("adam.m." + ps.name(i));
            const Tensor* tv = ck.find("adam.v." + ps.name(i));
            if (!tm || !tv)
                throw FormatError("checkpoint is missing optimizer state for " + ps.name(i));
            if (tm->shape != ps.value(i).shape || tv->shape != ps.value(i).shape)
                throw FormatError("optimizer state shape mismatch for " + ps.name(i));
            m_[i] = *tm;
            v_[i] = *tv;
        }
        step_ = ck.step;
        rng_.restore(ck.rng_state, ck.rng_have_spare,
                     std::bit_cast<double>(ck.rng_spare_bits));
    }

    size_t steps_per_epoch(size_t n) const {
        return (n + cfg_.batch_size - 1) / cfg_.batch_size;
    }

private:
    // Returns (mean pixel loss, balance loss) for one batch and applies a
    // single optimizer step.
    std::pair<double, double> train_batch(const std::vector<const Scene*>& batch) {
        size_t bsz = batch.size();
        size_t kk = cfg_.model.num_experts;
        size_t d = cfg_.model.latent_dim;
        while (tapes_.size() < bsz) tapes_.push_back(std::make_unique<Tape>());
        for (Tensor& g : grads_) g.fill(0.0f);

        // Forward every sample on its own tape; the noise draws come from the
        // run stream in batch order.
        std::vector<ForwardResultT<float>> fwd;
        fwd.reserve(bsz);
        std::vector<double> importance(kk, 0.0);
        double ce_sum = 0.0;
        for (size_t i = 0; i < bsz; ++i) {
            tapes_[i]->reset();
            Tensor eta({d});
            for (size_t e = 0; e < d; ++e) eta[e] = float(rng_.normal());
            fwd.push_back(model_.forward(*tapes_[i], *batch[i], &eta, cfg_.gate_backward));
            double bce = double(fwd.back().bce.value()[0]);
            ce_sum += bce;
            const Tensor& pi = fwd.back().decision.pi.value();
            for (size_t j = 0; j < kk; ++j) importance[j] += double(pi[j]);
        }
        double mean_ce = ce_sum / double(bsz);
        Cv2Result<double> cv2 = cv2_loss(importance);
        double loss = mean_ce + cfg_.balance_weight * cv2.loss;
        if (!std::isfinite(loss))
            throw NumericError("non-finite loss at step " + std::to_string(step_ + 1));

        // One seeded backward per sample: the pixel term gets 1/B, the gate
        // vector gets the balance loss gradient through the importance sums.
        Tensor pi_seed({kk});
        for (size_t j = 0; j < kk; ++j)
            pi_seed[j] = float(cfg_.balance_weight * cv2.d_importance[j]);
        for (size_t i = 0; i < bsz; ++i) {
            std::vector<std::pair<Var, Tensor>> seeds;
            seeds.emplace_back(fwd[i].bce, Tensor({1}, {float(1.0 / double(bsz))}));
            if (cfg_.balance_weight > 0.0) seeds.emplace_back(fwd[i].decision.pi, pi_seed);
            tapes_[i]->backward_seeded(seeds);
            fwd[i].leaves.accumulate_grads(grads_);
        }
        const ParamSet& ps = model_.params();
        for (size_t i = 0; i < ps.size(); ++i)
            if (!grads_[i].all_finite())
                throw NumericError("non-finite gradient in " + ps.name(i) + " at step " +
                                   std::to_string(step_ + 1));

        apply_adam();
        return {mean_ce, cv2.loss};
    }

    void apply_adam() {
        ++step_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        ParamSet& ps = model_.params();
        for (size_t i = 0; i < ps.size(); ++i) {
            Tensor& p = ps.value(i);
            for (size_t e = 0; e < p.numel(); ++e) {
                double g = double(grads_[i][e]);
                double m = cfg_.beta1 * double(m_[i][e]) + (1.0 - cfg_.beta1) * g;
                double v = cfg_.beta2 * double(v_[i][e]) + (1.0 - cfg_.beta2) * g * g;
                m_[i][e] = float(m);
                v_[i][e] = float(v);
                double update = cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.adam_eps);
                if (cfg_.weight_decay != 0.0)
                    update += cfg_.lr * cfg_.weight_decay * double(p[e]);
                p[e] = float(double(p[e]) - update);
            }
        }
    }

    TrainConfig cfg_;
    Model model_;
    Rng rng_;
    uint64_t step_ = 0;
    std::vector<Tensor> m_, v_, grads_;
    std::vector<std::unique_ptr<Tape>> tapes_;
};

}  // namespace shapemoe
