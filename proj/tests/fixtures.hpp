#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "cca/model.hpp"
#include "cca/transformer.hpp"

namespace cca::testing {

inline ModelConfig tiny_config(int layers = 2, std::uint64_t seed = 7) {
    ModelConfig c;
    c.n_layers = layers;
    c.d_model = 16;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.d_head = 4;
    c.d_mlp = 12;
    c.vocab_size = 11;
    c.max_seq_len = 24;
    c.seed = seed;
    return c;
}

inline Parameters random_params(const ModelConfig& cfg, float scale, std::uint64_t seed) {
    Parameters p = init_parameters(cfg);
    Rng rng(seed);
    for (auto& v : p.values()) {
        v = static_cast<float>(rng.normal()) * scale;
    }
    // keep norm gains near one so activations stay well scaled
    for (const auto& e : p.layout().tensors()) {
        if (e.kind == TensorKind::attn_norm || e.kind == TensorKind::mlp_norm || e.kind == TensorKind::final_norm) {
            for (auto& v : p.values().subspan(e.offset, e.size())) {
                v = 1.0f + 0.1f * static_cast<float>(rng.normal());
            }
        }
    }
    return p;
}

inline bool bit_equal(std::span<const float> a, std::span<const float> b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) {
               return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
           });
}

/// One-layer model whose next-token logits depend only on the current token:
/// logits(next | cur) = table(cur, next). Every block weight is zero, the
/// embedding is one-hot and the unembedding stores the table.
template <class Table>
Parameters bigram_params(int vocab, Table&& table, int max_seq_len = 160) {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.d_head = 2 * ((vocab + 7) / 8);
    c.d_model = c.n_heads * c.d_head;
    c.d_mlp = 4;
    c.vocab_size = vocab;
    c.max_seq_len = max_seq_len;
    Parameters p = init_parameters(c);
    std::fill(p.values().begin(), p.values().end(), 0.0f);
    for (auto& g : p.tensor(TensorKind::attn_norm, 0)) g = 1.0f;
    for (auto& g : p.tensor(TensorKind::mlp_norm, 0)) g = 1.0f;
    for (auto& g : p.tensor(TensorKind::final_norm)) g = 1.0f;
    auto emb = p.tensor(TensorKind::token_embedding);
    auto un = p.tensor(TensorKind::unembedding);
    // the final norm maps a one-hot row to gain * e_t
    const double gain = 1.0 / std::sqrt(1.0 / c.d_model + static_cast<double>(c.norm_eps));
    for (int t = 0; t < vocab; ++t) {
        emb[static_cast<std::size_t>(t) * c.d_model + t] = 1.0f;
        for (int v = 0; v < vocab; ++v) {
            un[static_cast<std::size_t>(v) * c.d_model + t] = static_cast<float>(table(t, v) / gain);
        }
    }
    return p;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("cca_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace cca::testing
