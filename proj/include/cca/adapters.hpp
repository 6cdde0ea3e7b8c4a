#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "cca/model.hpp"

namespace cca {

/// Low-rank factors for one projection: delta W = scale * B * A,
/// A is rank x in, B is out x rank.
struct AdapterEntry {
    TensorKind target{};
    int layer = 0;
    std::size_t a_offset = 0;
    std::size_t b_offset = 0;
    int in = 0;
    int out = 0;
};

/// LoRA adapters on every attention (q, k, v, o) and MLP (up, gate, down)
/// projection of every block.
class LoraAdapters {
public:
    LoraAdapters() = default;
    LoraAdapters(const ModelConfig& cfg, int rank, float alpha, float dropout);

    /// A uniform in +-1/sqrt(in), B = 0, so the adapted model starts equal to the base.
    void init(std::uint64_t seed);

    const AdapterEntry* find(TensorKind target, int layer) const;
    const std::vector<AdapterEntry>& entries() const { return entries_; }
    std::span<float> values() { return values_; }
    std::span<const float> values() const { return values_; }

    int rank() const { return rank_; }
    float alpha() const { return alpha_; }
    float dropout() const { return dropout_; }
    float scale() const { return alpha_ / static_cast<float>(rank_); }
    const ModelConfig& config() const { return cfg_; }

    /// W += scale * B * A for every adapted projection.
    void merge_into(Parameters& params) const;

    std::uint64_t hash() const;

    void save(const std::filesystem::path& path, const std::map<std::string, std::string>& extra = {}) const;
    static LoraAdapters load(const std::filesystem::path& path);

private:
    ModelConfig cfg_;
    int rank_ = 0;
    float alpha_ = 0.0f;
    float dropout_ = 0.0f;
    std::vector<AdapterEntry> entries_;
    std::vector<float> values_;
};

}  // namespace cca
