// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shapemoe/config.hpp"
#include "shapemoe/io.hpp"
#include "shapemoe/model.hpp"

namespace shapemoe {

inline nlohmann::json model_config_json(const ModelConfig& c) {
    return nlohmann::json{{"side", c.side},
                          {"embed_dim", c.embed_dim},
                          {"latent_dim", c.latent_dim},
                          {"num_experts", c.num_experts},
                          {"top_k", c.top_k},
                          {"trunk_c1", c.trunk_c1},
                          {"feat_c", c.feat_c},
                          {"embed_c1", c.embed_c1},
                          {"mlp_hidden", c.mlp_hidden},
                          {"expert_hidden", c.expert_hidden}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.side = j.at("side").get<size_t>();
    c.embed_dim = j.at("embed_dim").get<size_t>();
    c.latent_dim = j.at("latent_dim").get<size_t>();
    c.num_experts = j.at("num_experts").get<size_t>();
    c.top_k = j.at("top_k").get<size_t>();
    c.trunk_c1 = j.at("trunk_c1").get<size_t>();
    c.feat_c = j.at("feat_c").get<size_t>();
    c.embed_c1 = j.at("embed_c1").get<size_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<size_t>();
    c.expert_hidden = j.at("expert_hidden").get<size_t>();
    return c;
}

inline nlohmann::json train_config_json(const TrainConfig& c) {
    return nlohmann::json{{"seed", c.seed},
                          {"epochs", c.epochs},
                          {"batch_size", c.batch_size},
                          {"lr", c.lr},
                          {"beta1", c.beta1},
                          {"beta2", c.beta2},
                          {"adam_eps", c.adam_eps},
                          {"weight_decay", c.weight_decay},
                          {"balance_weight", c.balance_weight},
                          {"gate_backward",
                           c.gate_backward == GateBackward::dense ? "dense" : "exact"},
                          {"model", model_config_json(c.model)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.seed = j.at("seed").get<uint64_t>();
    c.epochs = j.at("epochs").get<size_t>();
    c.batch_size = j.at("batch_size").get<size_t>();
    c.lr = j.at("lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.balance_weight = j.at("balance_weight").get<double>();
    std::string gb = j.at("gate_backward").get<std::string>();
    if (gb == "dense")
        c.gate_backward = GateBackward::dense;
    else if (gb == "exact")
        c.gate_backward = GateBackward::exact;
    else
        throw FormatError("unknown gate_backward mode: " + gb);
    c.model = model_config_from_json(j.at("model"));
    return c;
}

// Full training state: model parameters plus Adam moments (as adam.m.* and
// adam.v.* tensors), the config echo, step counter, and RNG state. The
// tensor list order is part of the format so save->load->save is
// byte-identical.
struct CheckpointData {
    TrainConfig config;
    uint64_t step = 0;
    uint64_t rng_state = 0;
    bool rng_have_spare = false;
    uint64_t rng_spare_bits = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

inline void save_checkpoint(const CheckpointData& ck, const std::string& path) {
    nlohmann::json dir = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : ck.tensors) {
        uint64_t len = uint64_t(t.numel()) * 4;
        dir.push_back({{"name", name},
                       {"shape", t.shape},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"length", len}});
        offset += len;
    }
    nlohmann::json header{{"config", train_config_json(ck.config)},
                          {"step", ck.step},
                          {"rng", {{"state", ck.rng_state},
                                   {"have_spare", ck.rng_have_spare},
                                   {"spare_bits", ck.rng_spare_bits}}},
                          {"tensors", dir}};
    std::string hs = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open for writing: " + path);
    os.write("SMCK", 4);
    detail::put_le<uint32_t>(os, 1);
    detail::put_le<uint32_t>(os, uint32_t(hs.size()));
    detail::put_bytes(os, hs.data(), hs.size());
    for (const auto& [name, t] : ck.tensors)
        detail::put_bytes(os, t.data.data(), t.numel() * 4);
    if (!os) throw FormatError("write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open for reading: " + path);
    detail::ByteReader r{is};
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "SMCK", 4) != 0) throw FormatError("bad magic at byte offset 0");
    uint32_t version = r.get<uint32_t>();
    if (version != 1)
        throw FormatError("unsupported version " + std::to_string(version) +
                          " at byte offset 4");
    uint32_t hlen = r.get<uint32_t>();
    std::string hs(hlen, '\0');
    r.read(hs.data(), hlen);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint header: ") + e.what());
    }
    CheckpointData ck;
    try {
        ck.config = train_config_from_json(header.at("config"));
        ck.step = header.at("step").get<uint64_t>();
        const auto& rj = header.at("rng");
        ck.rng_state = rj.at("state").get<uint64_t>();
        ck.rng_have_spare = rj.at("have_spare").get<bool>();
        ck.rng_spare_bits = rj.at("spare_bits").get<uint64_t>();

        size_t payload_start = r.offset;
        for (const auto& e : header.at("tensors")) {
            std::string name = e.at("name").get<std::string>();
            std::vector<size_t> shape = e.at("shape").get<std::vector<size_t>>();
            std::string dtype = e.at("dtype").get<std::string>();
            if (dtype != "f32") throw FormatError("tensor " + name + ": unsupported dtype " + dtype);
            uint64_t off = e.at("offset").get<uint64_t>();
            uint64_t len = e.at("length").get<uint64_t>();
            Tensor t(shape);
            if (len != uint64_t(t.numel()) * 4)
                throw FormatError("tensor " + name + ": length does not match shape");
            if (r.offset != payload_start + off)
                throw FormatError("tensor " + name + ": unexpected payload offset");
            r.read(t.data.data(), len);
            ck.tensors.emplace_back(std::move(name), std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint header: ") + e.what());
    }
    return ck;
}

// Installs a checkpoint's model parameters into a freshly built model.
// Optimizer-state tensors (adam.*) are ignored here; any other name the model
// does not define is an error, as is a missing or misshapen parameter.
template <typename S>
void apply_params(const CheckpointData& ck, ModelT<S>& model) {
    if (ck.config.model.num_experts != model.config().num_experts)
        throw CompatError("checkpoint has " + std::to_string(ck.config.model.num_experts) +
                          " experts but the model expects " +
                          std::to_string(model.config().num_experts));
    ParamSetT<S>& ps = model.params();
    std::vector<bool> seen(ps.size(), false);
    for (const auto& [name, t] : ck.tensors) {
        if (name.starts_with("adam.")) continue;
        if (!ps.has(name)) throw FormatError("unknown tensor name: " + name);
        for (size_t i = 0; i < ps.size(); ++i)
            if (ps.name(i) == name) seen[i] = true;
        TensorT<S>& dst = ps.get(name);
        if (dst.shape != t.shape)
            throw FormatError("tensor " + name + ": shape mismatch, checkpoint has " +
                              shape_str(t.shape) + " model expects " + shape_str(dst.shape));
        for (size_t i = 0; i < t.numel(); ++i) dst[i] = S(t[i]);
    }
    for (size_t i = 0; i < ps.size(); ++i)
        if (!seen[i]) throw FormatError("checkpoint is missing tensor: " + ps.name(i));
}

// Builds the model a checkpoint describes and loads its parameters.
inline Model model_from_checkpoint(const CheckpointData& ck) {
    Model m(ck.config.model);
    apply_params(ck, m);
    return m;
}

}  // namespace shapemoe
