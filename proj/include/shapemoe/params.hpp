// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "shapemoe/rng.hpp"
#include "shapemoe/tape.hpp"
#include "shapemoe/tensor.hpp"

namespace shapemoe {

// Named trainable tensors in a fixed registration order. The order defines
// the optimizer's traversal and the checkpoint layout, so it must not depend
// on anything but the model configuration.
template <typename S>
class ParamSetT {
public:
    TensorT<S>& add(const std::string& name, std::vector<size_t> shape) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        index_[name] = names_.size();
        names_.push_back(name);
        values_.emplace_back(std::move(shape));
        return values_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    TensorT<S>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter name: " + name);
        return values_[it->second];
    }
    const TensorT<S>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter name: " + name);
        return values_[it->second];
    }

    size_t size() const { return names_.size(); }
    const std::string& name(size_t i) const { return names_[i]; }
    TensorT<S>& value(size_t i) { return values_[i]; }
    const TensorT<S>& value(size_t i) const { return values_[i]; }

    size_t total_count() const {
        size_t n = 0;
        for (const auto& v : values_) n += v.numel();
        return n;
    }

    template <typename D>
    ParamSetT<D> cast() const {
        ParamSetT<D> out;
        for (size_t i = 0; i < names_.size(); ++i) {
            auto& t = out.add(names_[i], values_[i].shape);
            for (size_t j = 0; j < t.numel(); ++j) t[j] = D(values_[i][j]);
        }
        return out;
    }

private:
    std::vector<std::string> names_;
    std::vector<TensorT<S>> values_;
    std::unordered_map<std::string, size_t> index_;
};

using ParamSet = ParamSetT<float>;

// He fan-in initialization: normal with std sqrt(2 / fan_in). Draws happen in
// registration order so initialization is reproducible from the seed alone.
template <typename S>
void he_init(TensorT<S>& t, size_t fan_in, Rng& rng) {
    double std = std::sqrt(2.0 / double(fan_in));
    for (S& v : t.data) v = S(rng.normal() * std);
}

// Per-tape cache of parameter leaves. Each parameter tensor is copied onto
// the tape at most once per forward pass; unevaluated experts never touch the
// tape at all.
template <typename S>
class ParamLeavesT {
public:
    ParamLeavesT(TapeT<S>& tape, const ParamSetT<S>& params)
        : tape_(&tape), params_(&params) {}

    VarT<S> leaf(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        VarT<S> v = tape_->alloc(params_->get(name));
        cache_.emplace(name, v);
        return v;
    }

    bool touched(const std::string& name) const { return cache_.count(name) != 0; }

    // Adds this tape's parameter gradients into accumulators aligned with the
    // parameter set's registration order.
    void accumulate_grads(std::vector<TensorT<S>>& grads) const {
        for (size_t i = 0; i < params_->size(); ++i) {
            auto it = cache_.find(params_->name(i));
            if (it == cache_.end()) continue;
            const TensorT<S>& g = tape_->grad(it->second.id);
            TensorT<S>& dst = grads[i];
            for (size_t j = 0; j < g.numel(); ++j) dst[j] += g[j];
        }
    }

private:
    TapeT<S>* tape_;
    const ParamSetT<S>* params_;
    std::unordered_map<std::string, VarT<S>> cache_;
};

using ParamLeaves = ParamLeavesT<float>;

}  // namespace shapemoe
