#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cca/common.hpp"

namespace cca {

/// Shape of the toy decoder-only language model.
struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;     // query heads per layer
    int n_kv_heads = 2;  // key/value heads per layer, divides n_heads
    int d_head = 32;     // d_model / n_heads
    int d_mlp = 512;     // gated MLP hidden width (= maskable neurons per layer)
    int vocab_size = 0;
    int max_seq_len = 256;
    std::uint64_t seed = 0;
    float rope_base = 10000.0f;
    float norm_eps = 1e-5f;
    float init_scale = 0.02f;

    /// Throws ShapeError if the shape is inconsistent.
    void validate() const;

    int q_dim() const { return n_heads * d_head; }
    int kv_dim() const { return n_kv_heads * d_head; }
    int group_size() const { return n_heads / n_kv_heads; }
    int components_per_layer() const { return n_heads + 2 * n_kv_heads + d_mlp; }

    /// key=value lines, stable order.
    std::string to_text() const;
    static ModelConfig from_map(const std::map<std::string, std::string>& kv);

    bool operator==(const ModelConfig&) const = default;
};

enum class ComponentKind : std::uint8_t { q_head, k_head, v_head, mlp_neuron };

std::string_view to_string(ComponentKind kind);
ComponentKind component_kind_from_string(std::string_view s);

/// Address of one maskable unit: a query/key/value head or an MLP neuron.
struct ComponentId {
    int layer = 0;
    ComponentKind kind = ComponentKind::q_head;
    int index = 0;

    auto operator<=>(const ComponentId&) const = default;
};

std::string to_string(const ComponentId& id);

/// |M| = n_layers * (n_heads + 2 * n_kv_heads + d_mlp).
std::size_t count_components(const ModelConfig& cfg);

/// Flat mask index. Within a layer: q heads, then k heads, v heads, neurons.
std::size_t component_index(const ModelConfig& cfg, const ComponentId& id);
ComponentId component_from_index(const ModelConfig& cfg, std::size_t index);
bool is_valid(const ModelConfig& cfg, const ComponentId& id);
std::vector<ComponentId> all_components(const ModelConfig& cfg);

enum class TensorKind : std::uint8_t {
    token_embedding,
    attn_norm,
    wq,
    wk,
    wv,
    wo,
    mlp_norm,
    w_up,
    w_gate,
    w_down,
    final_norm,
    unembedding,
};

std::string_view to_string(TensorKind kind);

/// One weight tensor in the flat parameter array, stored row-major.
struct TensorEntry {
    TensorKind kind{};
    int layer = -1;  // -1 for embedding, final norm, unembedding
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;

    std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
    std::string name() const;
};

/// Elements offset, offset + stride, ..., offset + (count - 1) * stride.
struct ParamRange {
    std::size_t offset = 0;
    std::size_t count = 0;
    std::size_t stride = 1;

    bool contains(std::size_t i) const {
        if (i < offset || count == 0) {
            return false;
        }
        const std::size_t d = i - offset;
        return d % stride == 0 && d / stride < count;
    }
};

/// The parameter ranges owned by one component.
struct ComponentSlice {
    ComponentId id;
    std::vector<ParamRange> ranges;

    std::size_t size() const;
    bool contains(std::size_t offset) const;
    template <class F>
    void for_each(F&& f) const {
        for (const auto& r : ranges) {
            for (std::size_t i = 0; i < r.count; ++i) {
                f(r.offset + i * r.stride);
            }
        }
    }
};

class ParamLayout {
public:
    ParamLayout() = default;
    explicit ParamLayout(const ModelConfig& cfg);

    const TensorEntry& tensor(TensorKind kind, int layer = -1) const;
    const std::vector<TensorEntry>& tensors() const { return entries_; }
    std::size_t total_size() const { return total_; }

    /// Tensor owning a flat offset.
    const TensorEntry& owner(std::size_t offset) const;

    ComponentSlice component_slice(const ModelConfig& cfg, const ComponentId& id) const;

    /// Inverse of component_slice: the component owning `offset`, if any.
    std::optional<ComponentId> component_at(const ModelConfig& cfg, std::size_t offset) const;

    /// key=value lines describing every tensor.
    std::string to_text() const;

private:
    std::vector<TensorEntry> entries_;
    std::size_t per_layer_ = 0;
    std::size_t total_ = 0;
};

/// Flat float32 weight storage with its layout table.
class Parameters {
public:
    Parameters() = default;
    explicit Parameters(const ModelConfig& cfg);  // zero-initialized

    const ModelConfig& config() const { return cfg_; }
    const ParamLayout& layout() const { return layout_; }
    std::span<float> values() { return values_; }
    std::span<const float> values() const { return values_; }
    std::size_t size() const { return values_.size(); }

    std::span<float> tensor(TensorKind kind, int layer = -1);
    std::span<const float> tensor(TensorKind kind, int layer = -1) const;

    std::uint64_t hash() const;

private:
    ModelConfig cfg_;
    ParamLayout layout_;
    std::vector<float> values_;
};

/// Seeded initialization: normal(0, init_scale) matrices, unit norm gains.
Parameters init_parameters(const ModelConfig& cfg);

ComponentSlice component_slice(const Parameters& params, const ComponentId& id);

/// Checksum over every parameter not covered by any of `slices`.
std::uint64_t complement_hash(const Parameters& params, std::span<const ComponentSlice> slices);

/// Checkpoint file: "CCA1", u64 header length, UTF-8 header of key=value lines,
/// then the flat parameters as little-endian float32.
void save_checkpoint(const std::filesystem::path& path, const Parameters& params,
                     const std::map<std::string, std::string>& extra_header = {});
Parameters load_checkpoint(const std::filesystem::path& path,
                           std::map<std::string, std::string>* header_out = nullptr);

/// Generic "CCA1" container shared by checkpoints and adapter files.
void write_cca1(const std::filesystem::path& path, const std::string& header, std::span<const float> data);
std::vector<float> read_cca1(const std::filesystem::path& path, std::string& header);
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace cca
