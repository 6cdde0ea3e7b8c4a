#include "cca/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cca {

namespace {

constexpr char kMagic[4] = {'C', 'C', 'A', '1'};

int parse_int(const std::map<std::string, std::string>& kv, const std::string& key, int fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stoi(it->second);
}

float parse_float(const std::map<std::string, std::string>& kv, const std::string& key, float fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stof(it->second);
}

std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
    return v;
}

std::uint64_t to_le64(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return (static_cast<std::uint64_t>(to_le(static_cast<std::uint32_t>(v))) << 32) |
               to_le(static_cast<std::uint32_t>(v >> 32));
    }
    return v;
}

}  // namespace

// ----------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ShapeError("invalid model config: " + msg); };
    if (n_layers < 0 || d_model < 1 || n_heads < 1 || n_kv_heads < 1 || d_head < 1 || d_mlp < 1) {
        fail("dimensions must be positive (n_layers may be 0)");
    }
    if (n_heads % n_kv_heads != 0) {
        fail("n_heads must be a multiple of n_kv_heads");
    }
    if (d_head * n_heads != d_model) {
        fail("d_head * n_heads must equal d_model");
    }
    if (d_head % 2 != 0) {
        fail("d_head must be even for rotary embeddings");
    }
    if (vocab_size < 2) {
        fail("vocab_size must be at least 2");
    }
    if (max_seq_len < 1) {
        fail("max_seq_len must be positive");
    }
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "n_layers=" << n_layers << '\n'
       << "d_model=" << d_model << '\n'
       << "n_heads=" << n_heads << '\n'
       << "n_kv_heads=" << n_kv_heads << '\n'
       << "d_head=" << d_head << '\n'
       << "d_mlp=" << d_mlp << '\n'
       << "vocab_size=" << vocab_size << '\n'
       << "max_seq_len=" << max_seq_len << '\n'
       << "seed=" << seed << '\n'
       << "rope_base=" << rope_base << '\n'
       << "norm_eps=" << norm_eps << '\n'
       << "init_scale=" << init_scale << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    c.n_layers = parse_int(kv, "n_layers", c.n_layers);
    c.d_model = parse_int(kv, "d_model", c.d_model);
    c.n_heads = parse_int(kv, "n_heads", c.n_heads);
    c.n_kv_heads = parse_int(kv, "n_kv_heads", c.n_kv_heads);
    c.d_head = parse_int(kv, "d_head", c.d_model / std::max(1, c.n_heads));
    c.d_mlp = parse_int(kv, "d_mlp", c.d_mlp);
    c.vocab_size = parse_int(kv, "vocab_size", c.vocab_size);
    c.max_seq_len = parse_int(kv, "max_seq_len", c.max_seq_len);
    if (auto it = kv.find("seed"); it != kv.end()) {
        c.seed = std::stoull(it->second);
    }
    c.rope_base = parse_float(kv, "rope_base", c.rope_base);
    c.norm_eps = parse_float(kv, "norm_eps", c.norm_eps);
    c.init_scale = parse_float(kv, "init_scale", c.init_scale);
    return c;
}

// ----------------------------------------------------------------------------
// Components

std::string_view to_string(ComponentKind kind) {
    switch (kind) {
        case ComponentKind::q_head: return "Q_HEAD";
        case ComponentKind::k_head: return "K_HEAD";
        case ComponentKind::v_head: return "V_HEAD";
        case ComponentKind::mlp_neuron: return "MLP_NEURON";
    }
    return "?";
}

ComponentKind component_kind_from_string(std::string_view s) {
    if (s == "Q_HEAD") return ComponentKind::q_head;
    if (s == "K_HEAD") return ComponentKind::k_head;
    if (s == "V_HEAD") return ComponentKind::v_head;
    if (s == "MLP_NEURON") return ComponentKind::mlp_neuron;
    throw FormatError("unknown component kind: " + std::string(s));
}

std::string to_string(const ComponentId& id) {
    return "L" + std::to_string(id.layer) + "." + std::string(to_string(id.kind)) + "." + std::to_string(id.index);
}

std::size_t count_components(const ModelConfig& cfg) {
    return static_cast<std::size_t>(cfg.n_layers) * static_cast<std::size_t>(cfg.components_per_layer());
}

bool is_valid(const ModelConfig& cfg, const ComponentId& id) {
    if (id.layer < 0 || id.layer >= cfg.n_layers || id.index < 0) {
        return false;
    }
    switch (id.kind) {
        case ComponentKind::q_head: return id.index < cfg.n_heads;
        case ComponentKind::k_head:
        case ComponentKind::v_head: return id.index < cfg.n_kv_heads;
        case ComponentKind::mlp_neuron: return id.index < cfg.d_mlp;
    }
    return false;
}

std::size_t component_index(const ModelConfig& cfg, const ComponentId& id) {
    if (!is_valid(cfg, id)) {
        throw AddressError("invalid component id " + to_string(id));
    }
    std::size_t base = static_cast<std::size_t>(id.layer) * static_cast<std::size_t>(cfg.components_per_layer());
    switch (id.kind) {
        case ComponentKind::q_head: return base + static_cast<std::size_t>(id.index);
        case ComponentKind::k_head: return base + static_cast<std::size_t>(cfg.n_heads + id.index);
        case ComponentKind::v_head: return base + static_cast<std::size_t>(cfg.n_heads + cfg.n_kv_heads + id.index);
        case ComponentKind::mlp_neuron:
            return base + static_cast<std::size_t>(cfg.n_heads + 2 * cfg.n_kv_heads + id.index);
    }
    return base;
}

ComponentId component_from_index(const ModelConfig& cfg, std::size_t index) {
    if (index >= count_components(cfg)) {
        throw AddressError("component index " + std::to_string(index) + " out of range");
    }
    const auto per = static_cast<std::size_t>(cfg.components_per_layer());
    const int layer = static_cast<int>(index / per);
    int r = static_cast<int>(index % per);
    if (r < cfg.n_heads) {
        return {layer, ComponentKind::q_head, r};
    }
    r -= cfg.n_heads;
    if (r < cfg.n_kv_heads) {
        return {layer, ComponentKind::k_head, r};
    }
    r -= cfg.n_kv_heads;
    if (r < cfg.n_kv_heads) {
        return {layer, ComponentKind::v_head, r};
    }
    r -= cfg.n_kv_heads;
    return {layer, ComponentKind::mlp_neuron, r};
}

std::vector<ComponentId> all_components(const ModelConfig& cfg) {
    std::vector<ComponentId> out;
    const std::size_t n = count_components(cfg);
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(component_from_index(cfg, i));
    }
    return out;
}

// ----------------------------------------------------------------------------
// Layout

std::string_view to_string(TensorKind kind) {
    switch (kind) {
        case TensorKind::token_embedding: return "token_embedding";
        case TensorKind::attn_norm: return "attn_norm";
        case TensorKind::wq: return "wq";
        case TensorKind::wk: return "wk";
        case TensorKind::wv: return "wv";
        case TensorKind::wo: return "wo";
        case TensorKind::mlp_norm: return "mlp_norm";
        case TensorKind::w_up: return "w_up";
        case TensorKind::w_gate: return "w_gate";
        case TensorKind::w_down: return "w_down";
        case TensorKind::final_norm: return "final_norm";
        case TensorKind::unembedding: return "unembedding";
    }
    return "?";
}

std::string TensorEntry::name() const {
    if (layer < 0) {
        return std::string(to_string(kind));
    }
    return "layers." + std::to_string(layer) + "." + std::string(to_string(kind));
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
    cfg.validate();
    std::size_t off = 0;
    auto add = [&](TensorKind kind, int layer, int rows, int cols) {
        entries_.push_back({kind, layer, off, rows, cols});
        off += entries_.back().size();
    };
    add(TensorKind::token_embedding, -1, cfg.vocab_size, cfg.d_model);
    const std::size_t layer_start = off;
    for (int l = 0; l < cfg.n_layers; ++l) {
        add(TensorKind::attn_norm, l, 1, cfg.d_model);
        add(TensorKind::wq, l, cfg.q_dim(), cfg.d_model);
        add(TensorKind::wk, l, cfg.kv_dim(), cfg.d_model);
        add(TensorKind::wv, l, cfg.kv_dim(), cfg.d_model);
        add(TensorKind::wo, l, cfg.d_model, cfg.q_dim());
        add(TensorKind::mlp_norm, l, 1, cfg.d_model);
        add(TensorKind::w_up, l, cfg.d_mlp, cfg.d_model);
        add(TensorKind::w_gate, l, cfg.d_mlp, cfg.d_model);
        add(TensorKind::w_down, l, cfg.d_model, cfg.d_mlp);
        if (l == 0) {
            per_layer_ = off - layer_start;
        }
    }
    add(TensorKind::final_norm, -1, 1, cfg.d_model);
    add(TensorKind::unembedding, -1, cfg.vocab_size, cfg.d_model);
    total_ = off;
}

const TensorEntry& ParamLayout::tensor(TensorKind kind, int layer) const {
    if (layer < 0) {
        for (const auto& e : entries_) {
            if (e.kind == kind && e.layer < 0) {
                return e;
            }
        }
    } else {
        // 1 global tensor first, then 9 per layer
        const std::size_t base = 1 + static_cast<std::size_t>(layer) * 9;
        for (std::size_t i = base; i < base + 9 && i < entries_.size(); ++i) {
            if (entries_[i].kind == kind && entries_[i].layer == layer) {
                return entries_[i];
            }
        }
    }
    throw AddressError("no tensor " + std::string(to_string(kind)) + " at layer " + std::to_string(layer));
}

const TensorEntry& ParamLayout::owner(std::size_t offset) const {
    if (offset >= total_) {
        throw AddressError("parameter offset " + std::to_string(offset) + " out of range");
    }
    auto it = std::upper_bound(entries_.begin(), entries_.end(), offset,
                               [](std::size_t o, const TensorEntry& e) { return o < e.offset; });
    return *(it - 1);
}

ComponentSlice ParamLayout::component_slice(const ModelConfig& cfg, const ComponentId& id) const {
    if (!is_valid(cfg, id)) {
        throw AddressError("invalid component id " + to_string(id));
    }
    ComponentSlice s{id, {}};
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto dh = static_cast<std::size_t>(cfg.d_head);
    const auto idx = static_cast<std::size_t>(id.index);
    auto rows = [&](TensorKind kind, std::size_t first_row, std::size_t n_rows) {
        const auto& t = tensor(kind, id.layer);
        s.ranges.push_back({t.offset + first_row * static_cast<std::size_t>(t.cols),
                            n_rows * static_cast<std::size_t>(t.cols), 1});
    };
    switch (id.kind) {
        case ComponentKind::q_head: rows(TensorKind::wq, idx * dh, dh); break;
        case ComponentKind::k_head: rows(TensorKind::wk, idx * dh, dh); break;
        case ComponentKind::v_head: rows(TensorKind::wv, idx * dh, dh); break;
        case ComponentKind::mlp_neuron: {
            rows(TensorKind::w_up, idx, 1);
            rows(TensorKind::w_gate, idx, 1);
            const auto& down = tensor(TensorKind::w_down, id.layer);
            s.ranges.push_back({down.offset + idx, d, static_cast<std::size_t>(cfg.d_mlp)});
            break;
        }
    }
    return s;
}

std::optional<ComponentId> ParamLayout::component_at(const ModelConfig& cfg, std::size_t offset) const {
    const auto& t = owner(offset);
    const std::size_t local = offset - t.offset;
    const auto row = static_cast<int>(local / static_cast<std::size_t>(t.cols));
    const auto col = static_cast<int>(local % static_cast<std::size_t>(t.cols));
    switch (t.kind) {
        case TensorKind::wq: return ComponentId{t.layer, ComponentKind::q_head, row / cfg.d_head};
        case TensorKind::wk: return ComponentId{t.layer, ComponentKind::k_head, row / cfg.d_head};
        case TensorKind::wv: return ComponentId{t.layer, ComponentKind::v_head, row / cfg.d_head};
        case TensorKind::w_up:
        case TensorKind::w_gate: return ComponentId{t.layer, ComponentKind::mlp_neuron, row};
        case TensorKind::w_down: return ComponentId{t.layer, ComponentKind::mlp_neuron, col};
        default: return std::nullopt;
    }
}

std::string ParamLayout::to_text() const {
    std::ostringstream os;
    for (const auto& e : entries_) {
        os << "tensor." << e.name() << '=' << e.offset << ',' << e.rows << ',' << e.cols << '\n';
    }
    os << "total_params=" << total_ << '\n';
    return os.str();
}

std::size_t ComponentSlice::size() const {
    std::size_t n = 0;
    for (const auto& r : ranges) {
        n += r.count;
    }
    return n;
}

bool ComponentSlice::contains(std::size_t offset) const {
    return std::any_of(ranges.begin(), ranges.end(), [&](const ParamRange& r) { return r.contains(offset); });
}

// ----------------------------------------------------------------------------
// Parameters

Parameters::Parameters(const ModelConfig& cfg) : cfg_(cfg), layout_(cfg), values_(layout_.total_size(), 0.0f) {}

std::span<float> Parameters::tensor(TensorKind kind, int layer) {
    const auto& e = layout_.tensor(kind, layer);
    return std::span<float>(values_).subspan(e.offset, e.size());
}

std::span<const float> Parameters::tensor(TensorKind kind, int layer) const {
    const auto& e = layout_.tensor(kind, layer);
    return std::span<const float>(values_).subspan(e.offset, e.size());
}

std::uint64_t Parameters::hash() const {
    Fnv1a h;
    h.update_span(std::span<const float>(values_));
    return h.digest();
}

Parameters init_parameters(const ModelConfig& cfg) {
    Parameters p(cfg);
    Rng rng(derive_seed(cfg.seed, {0x1417}));
    for (const auto& e : p.layout().tensors()) {
        auto t = p.values().subspan(e.offset, e.size());
        switch (e.kind) {
            case TensorKind::attn_norm:
            case TensorKind::mlp_norm:
            case TensorKind::final_norm: std::fill(t.begin(), t.end(), 1.0f); break;
            default: {
                float scale = cfg.init_scale;
                // residual-writing projections start smaller
                if (e.kind == TensorKind::wo || e.kind == TensorKind::w_down) {
                    scale /= std::sqrt(2.0f * static_cast<float>(cfg.n_layers));
                }
                for (auto& v : t) {
                    v = static_cast<float>(rng.normal()) * scale;
                }
            }
        }
    }
    return p;
}

ComponentSlice component_slice(const Parameters& params, const ComponentId& id) {
    return params.layout().component_slice(params.config(), id);
}

std::uint64_t complement_hash(const Parameters& params, std::span<const ComponentSlice> slices) {
    std::vector<char> covered(params.size(), 0);
    for (const auto& s : slices) {
        s.for_each([&](std::size_t i) { covered[i] = 1; });
    }
    Fnv1a h;
    const auto v = params.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!covered[i]) {
            h.update(&v[i], sizeof(float));
        }
    }
    return h.digest();
}

// ----------------------------------------------------------------------------
// Checkpoint IO

std::map<std::string, std::string> parse_key_values(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("malformed header line: " + line);
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

void write_cca1(const std::filesystem::path& path, const std::string& header, std::span<const float> data) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw InputError("cannot open " + path.string() + " for writing");
    }
    os.write(kMagic, 4);
    const std::uint64_t len = to_le64(header.size());
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::vector<std::uint32_t> buf(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        buf[i] = to_le(std::bit_cast<std::uint32_t>(data[i]));
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!os) {
        throw InputError("write failed: " + path.string());
    }
}

std::vector<float> read_cca1(const std::filesystem::path& path, std::string& header) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw InputError("cannot open " + path.string());
    }
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(path.string() + ": bad magic, expected CCA1");
    }
    std::uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof len);
    len = to_le64(len);
    if (!is || len > (1u << 26)) {
        throw FormatError(path.string() + ": bad header length");
    }
    header.assign(len, '\0');
    is.read(header.data(), static_cast<std::streamsize>(len));
    const auto kv = parse_key_values(header);
    auto it = kv.find("n_floats");
    if (it == kv.end()) {
        throw FormatError(path.string() + ": header lacks n_floats");
    }
    const std::size_t n = std::stoull(it->second);
    std::vector<std::uint32_t> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    if (!is) {
        throw FormatError(path.string() + ": truncated payload");
    }
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::bit_cast<float>(to_le(buf[i]));
    }
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const Parameters& params,
                     const std::map<std::string, std::string>& extra_header) {
    std::string header = "kind=checkpoint\n";
    header += "n_floats=" + std::to_string(params.size()) + "\n";
    header += params.config().to_text();
    header += params.layout().to_text();
    for (const auto& [k, v] : extra_header) {
        header += k + "=" + v + "\n";
    }
    write_cca1(path, header, params.values());
}

Parameters load_checkpoint(const std::filesystem::path& path, std::map<std::string, std::string>* header_out) {
    std::string header;
    auto data = read_cca1(path, header);
    const auto kv = parse_key_values(header);
    Parameters p(ModelConfig::from_map(kv));
    if (data.size() != p.size()) {
        throw FormatError(path.string() + ": parameter count does not match config");
    }
    for (const auto& e : p.layout().tensors()) {
        auto it = kv.find("tensor." + e.name());
        const std::string expect = std::to_string(e.offset) + "," + std::to_string(e.rows) + "," + std::to_string(e.cols);
        if (it == kv.end() || it->second != expect) {
            throw FormatError(path.string() + ": layout table mismatch at " + e.name());
        }
    }
    std::copy(data.begin(), data.end(), p.values().begin());
    if (header_out != nullptr) {
        *header_out = kv;
    }
    return p;
}

}  // namespace cca
