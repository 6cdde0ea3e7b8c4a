#include "cca/adapters.hpp"

#include <cmath>
#include <sstream>

namespace cca {

namespace {

constexpr TensorKind kTargets[] = {TensorKind::wq,   TensorKind::wk,     TensorKind::wv,    TensorKind::wo,
                                   TensorKind::w_up, TensorKind::w_gate, TensorKind::w_down};

}  // namespace

LoraAdapters::LoraAdapters(const ModelConfig& cfg, int rank, float alpha, float dropout)
    : cfg_(cfg), rank_(rank), alpha_(alpha), dropout_(dropout) {
    if (rank < 1) {
        throw InputError("adapter rank must be at least 1");
    }
    if (!(dropout >= 0.0f && dropout < 1.0f)) {
        throw InputError("adapter dropout must be in [0, 1)");
    }
    const ParamLayout layout(cfg);
    std::size_t off = 0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (TensorKind kind : kTargets) {
            const auto& t = layout.tensor(kind, l);
            AdapterEntry e{kind, l, off, off + static_cast<std::size_t>(rank) * t.cols, t.cols, t.rows};
            off = e.b_offset + static_cast<std::size_t>(t.rows) * rank;
            entries_.push_back(e);
        }
    }
    values_.assign(off, 0.0f);
}

void LoraAdapters::init(std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x10a}));
    std::fill(values_.begin(), values_.end(), 0.0f);
    for (const auto& e : entries_) {
        // uniform(-1/sqrt(in), 1/sqrt(in)) for A, zeros for B
        const double bound = 1.0 / std::sqrt(static_cast<double>(e.in));
        const std::size_t n = static_cast<std::size_t>(rank_) * e.in;
        for (std::size_t i = 0; i < n; ++i) {
            values_[e.a_offset + i] = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
        }
    }
}

const AdapterEntry* LoraAdapters::find(TensorKind target, int layer) const {
    if (layer < 0 || layer >= cfg_.n_layers) {
        return nullptr;
    }
    const std::size_t base = static_cast<std::size_t>(layer) * std::size(kTargets);
    for (std::size_t i = base; i < base + std::size(kTargets) && i < entries_.size(); ++i) {
        if (entries_[i].target == target) {
            return &entries_[i];
        }
    }
    return nullptr;
}

void LoraAdapters::merge_into(Parameters& params) const {
    if (!(params.config() == cfg_)) {
        throw ShapeError("adapters were built for a different model config");
    }
    const float s = scale();
    for (const auto& e : entries_) {
        auto w = params.tensor(e.target, e.layer);
        const float* A = values_.data() + e.a_offset;
        const float* B = values_.data() + e.b_offset;
        for (int o = 0; o < e.out; ++o) {
            for (int i = 0; i < e.in; ++i) {
                float acc = 0.0f;
                for (int r = 0; r < rank_; ++r) {
                    acc += B[static_cast<std::size_t>(o) * rank_ + r] * A[static_cast<std::size_t>(r) * e.in + i];
                }
                w[static_cast<std::size_t>(o) * e.in + i] += s * acc;
            }
        }
    }
}

std::uint64_t LoraAdapters::hash() const {
    Fnv1a h;
    h.update_span(std::span<const float>(values_));
    return h.digest();
}

void LoraAdapters::save(const std::filesystem::path& path, const std::map<std::string, std::string>& extra) const {
    std::ostringstream os;
    os << "kind=lora_adapters\n"
       << "n_floats=" << values_.size() << '\n'
       << "lora.rank=" << rank_ << '\n'
       << "lora.alpha=" << alpha_ << '\n'
       << "lora.dropout=" << dropout_ << '\n'
       << cfg_.to_text();
    for (const auto& [k, v] : extra) {
        os << k << '=' << v << '\n';
    }
    write_cca1(path, os.str(), values_);
}

LoraAdapters LoraAdapters::load(const std::filesystem::path& path) {
    std::string header;
    std::vector<float> data = read_cca1(path, header);
    const auto kv = parse_key_values(header);
    auto get = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) {
            throw FormatError("adapter file " + path.string() + " lacks header key " + key);
        }
        return it->second;
    };
    if (get("kind") != "lora_adapters") {
        throw FormatError(path.string() + " is not an adapter file");
    }
    LoraAdapters a(ModelConfig::from_map(kv), std::stoi(get("lora.rank")), std::stof(get("lora.alpha")),
                   std::stof(get("lora.dropout")));
    if (data.size() != a.values_.size()) {
        throw FormatError("adapter file " + path.string() + " has the wrong number of values");
    }
    a.values_ = std::move(data);
    return a;
}

}  // namespace cca
