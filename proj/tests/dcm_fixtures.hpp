#pragma once

#include "cca/dcm.hpp"
#include "fixtures.hpp"

namespace cca::testing {

/// Two-layer model in which only one MLP neuron of the last layer writes to
/// the residual direction that separates the desired from the undesired
/// logit. Without amplification the undesired token wins; doubling that
/// neuron flips the order. Every other component is weak.
struct PlantedCircuit {
    Parameters params;
    ComponentId planted;
    std::vector<ErrorLocalizationRecord> records;
    Token desired = 3;
    Token undesired = 4;
};

inline PlantedCircuit planted_circuit(int n_records = 48, std::uint64_t seed = 5) {
    PlantedCircuit pc;
    ModelConfig cfg = tiny_config(2, seed);
    pc.params = random_params(cfg, 0.02f, seed);
    Parameters& p = pc.params;
    const int d = cfg.d_model;
    const int neuron = 7;
    pc.planted = ComponentId{1, ComponentKind::mlp_neuron, neuron};

    auto emb = p.tensor(TensorKind::token_embedding);
    Rng rng(seed + 1);
    for (int t = 0; t < cfg.vocab_size; ++t) {
        float* row = emb.data() + static_cast<std::size_t>(t) * d;
        row[0] = -1.0f;  // separating direction starts negative
        row[1] = 1.0f;   // constant feature that drives the planted neuron
        for (int j = 2; j < d; ++j) row[j] = static_cast<float>(0.3 * rng.normal());
    }
    for (auto& g : p.tensor(TensorKind::final_norm)) g = 1.0f;
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (auto& g : p.tensor(TensorKind::attn_norm, l)) g = 1.0f;
        for (auto& g : p.tensor(TensorKind::mlp_norm, l)) g = 1.0f;
        // nothing but the planted neuron writes to direction 0
        auto wo = p.tensor(TensorKind::wo, l);
        for (int j = 0; j < cfg.q_dim(); ++j) wo[j] = 0.0f;
        auto down = p.tensor(TensorKind::w_down, l);
        for (int j = 0; j < cfg.d_mlp; ++j) down[j] = 0.0f;
    }
    auto up = p.tensor(TensorKind::w_up, 1);
    auto gate = p.tensor(TensorKind::w_gate, 1);
    std::fill_n(up.begin() + static_cast<std::ptrdiff_t>(neuron) * d, d, 0.0f);
    std::fill_n(gate.begin() + static_cast<std::ptrdiff_t>(neuron) * d, d, 0.0f);
    up[static_cast<std::size_t>(neuron) * d + 1] = 1.0f;
    gate[static_cast<std::size_t>(neuron) * d + 1] = 3.0f;

    // scale the write so the neuron covers ~75% of the negative offset
    const TokenSeq probe = {1, 2, 5};
    const auto acts = capture_activations(p, probe);
    const float h = acts[component_index(cfg, pc.planted)].value.at(2, 0);
    p.tensor(TensorKind::w_down, 1)[static_cast<std::size_t>(neuron)] = 0.75f / h;

    auto un = p.tensor(TensorKind::unembedding);
    std::fill_n(un.begin() + static_cast<std::ptrdiff_t>(pc.desired) * d, d, 0.0f);
    std::fill_n(un.begin() + static_cast<std::ptrdiff_t>(pc.undesired) * d, d, 0.0f);
    un[static_cast<std::size_t>(pc.desired) * d] = 1.0f;
    un[static_cast<std::size_t>(pc.undesired) * d] = -1.0f;

    Rng toks(seed + 2);
    for (int i = 0; i < n_records; ++i) {
        ErrorLocalizationRecord r;
        r.instance_id = i;
        const auto len = toks.uniform_int(3, 8);
        r.prefix.push_back(1);
        for (int k = 1; k < len; ++k) r.prefix.push_back(static_cast<Token>(toks.uniform_int(5, cfg.vocab_size - 1)));
        r.desired = pc.desired;
        r.undesired = pc.undesired;
        pc.records.push_back(std::move(r));
    }
    return pc;
}

/// Components whose doubling alone puts the desired logit above the
/// undesired one on every record.
inline std::vector<int> single_component_flips(const Parameters& p, const std::vector<ErrorLocalizationRecord>& records) {
    const ModelConfig& cfg = p.config();
    std::vector<int> out;
    for (std::size_t i = 0; i < count_components(cfg); ++i) {
        Mask m = Mask::zeros(cfg);
        m.values[i] = 1.0f;
        bool all = true;
        for (const auto& r : records) {
            const Logits l = forward(p, r.prefix, &m);
            const auto row = l.row_span(l.rows - 1);
            all = all && row[static_cast<std::size_t>(r.desired)] > row[static_cast<std::size_t>(r.undesired)];
        }
        if (all) out.push_back(static_cast<int>(i));
    }
    return out;
}

}  // namespace cca::testing
