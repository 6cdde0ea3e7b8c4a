#include "cca/dcm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace cca {

using nlohmann::json;

double dcm_loss(std::span<const float> logits, Token desired, Token undesired, const Mask& mask, double lambda) {
    const auto n = static_cast<Token>(logits.size());
    if (desired < 0 || desired >= n || undesired < 0 || undesired >= n) {
        throw IndexError("desired/undesired token outside the vocabulary");
    }
    double sum = 0.0;
    for (float m : mask.values) sum += m;
    return -(static_cast<double>(logits[static_cast<std::size_t>(desired)]) -
             static_cast<double>(logits[static_cast<std::size_t>(undesired)])) +
           lambda * sum;
}

std::vector<int> binarize(const Mask& mask, float threshold) {
    std::vector<int> out;
    for (std::size_t i = 0; i < mask.values.size(); ++i) {
        if (mask.values[i] >= threshold) out.push_back(static_cast<int>(i));
    }
    return out;
}

std::vector<ComponentId> selected_components(const ModelConfig& cfg, const Mask& mask, float threshold) {
    std::vector<ComponentId> out;
    for (int i : binarize(mask, threshold)) out.push_back(component_from_index(cfg, i));
    return out;
}

MaskReport mask_report(const ModelConfig& cfg, const Mask& mask, float threshold) {
    MaskReport r;
    r.total = count_components(cfg);
    for (const auto& id : selected_components(cfg, mask, threshold)) {
        ++r.selected;
        switch (id.kind) {
            case ComponentKind::q_head: ++r.q_heads; break;
            case ComponentKind::k_head: ++r.k_heads; break;
            case ComponentKind::v_head: ++r.v_heads; break;
            case ComponentKind::mlp_neuron: ++r.mlp_neurons; break;
        }
    }
    r.percentage = r.total > 0 ? static_cast<double>(r.selected) / r.total : 0.0;
    return r;
}

Mask binary_mask(const Mask& mask, float threshold) {
    Mask b{std::vector<float>(mask.values.size(), 0.0f)};
    for (int i : binarize(mask, threshold)) b.values[static_cast<std::size_t>(i)] = 1.0f;
    return b;
}

DcmResult train_mask(const Parameters& params, std::span<const ErrorLocalizationRecord> records, const DcmConfig& cfg,
                     const DcmObserver& observer) {
    if (records.empty()) {
        throw InputError("mask training needs at least one record");
    }
    if (!(cfg.threshold > 0.0f && cfg.threshold < 1.0f) || cfg.lambda < 0.0 || cfg.batch_size < 1) {
        throw InputError("invalid mask training configuration");
    }
    const ModelConfig& mc = params.config();
    const std::size_t n_comp = static_cast<std::size_t>(count_components(mc));
    DcmResult res;
    res.mask = Mask::filled(mc, cfg.init_value);
    std::vector<double> m1(n_comp, 0.0), m2(n_comp, 0.0), grad(n_comp);

    const int batches_per_epoch = static_cast<int>((records.size() + cfg.batch_size - 1) / cfg.batch_size);
    const int window = std::max(1, static_cast<int>(std::ceil(cfg.early_stop_fraction * batches_per_epoch)));
    int unchanged = 0;  // consecutive steps with the same support, across epochs
    std::vector<int> support = binarize(res.mask, cfg.threshold);

    GradRequest req;
    req.params = GradRequest::Params::none;
    req.mask = true;
    std::vector<std::size_t> order(records.size());

    for (int epoch = 0; epoch < cfg.epochs && !res.early_stopped; ++epoch) {
        ++res.epochs_run;
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, {0xdc, static_cast<std::uint64_t>(epoch)}));
        rng.shuffle(order);
        for (int b = 0; b < batches_per_epoch; ++b) {
            const std::size_t lo = static_cast<std::size_t>(b) * cfg.batch_size;
            const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0);
            double loss = 0.0;
            ForwardOptions opts;
            opts.mask = &res.mask;
            for (std::size_t k = lo; k < hi; ++k) {
                const auto& r = records[order[k]];
                const int pos = static_cast<int>(r.prefix.size()) - 1;
                auto lg = loss_and_gradients(params, r.prefix, logit_difference_loss(pos, r.desired, r.undesired),
                                             req, opts);
                loss += lg.loss;
                for (std::size_t i = 0; i < n_comp; ++i) grad[i] += lg.grads.mask[i];
            }
            const double inv = 1.0 / static_cast<double>(hi - lo);
            double msum = 0.0;
            for (float m : res.mask.values) msum += m;
            loss = loss * inv + cfg.lambda * msum;
            if (!std::isfinite(loss)) {
                throw NumericError("mask training loss is not finite at step " + std::to_string(res.steps), -1);
            }
            res.batch_losses.push_back(loss);

            ++res.steps;
            const double bc1 = 1.0 - std::pow(cfg.beta1, res.steps);
            const double bc2 = 1.0 - std::pow(cfg.beta2, res.steps);
            for (std::size_t i = 0; i < n_comp; ++i) {
                const double g = grad[i] * inv + cfg.lambda;
                m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
                m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
                const double step = cfg.learning_rate * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + cfg.epsilon);
                const double v = std::clamp(static_cast<double>(res.mask.values[i]) - step, 0.0, 1.0);
                res.mask.values[i] = static_cast<float>(v);
            }
            const auto [lo_it, hi_it] = std::minmax_element(res.mask.values.begin(), res.mask.values.end());
            if (*lo_it < 0.0f || *hi_it > 1.0f) {
                throw NumericError("mask left [0, 1] after clamping", -1);
            }
            if (observer) observer(res.steps, res.mask);

            std::vector<int> now = binarize(res.mask, cfg.threshold);
            unchanged = now == support ? unchanged + 1 : 0;
            support = std::move(now);
            if (unchanged >= window) {
                res.early_stopped = true;
                break;
            }
        }
    }
    res.report = mask_report(mc, res.mask, cfg.threshold);
    return res;
}

const std::vector<double>& default_lambda_candidates() {
    static const std::vector<double> c = {1e-2, 5e-3, 1e-3, 1e-4};
    return c;
}

LambdaSweep sweep_lambda(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                         const DcmConfig& base, std::span<const double> candidates, const MaskScorer& scorer) {
    if (candidates.empty()) {
        throw InputError("lambda sweep needs at least one candidate");
    }
    LambdaSweep sweep;
    for (double lambda : candidates) {
        DcmConfig cfg = base;
        cfg.lambda = lambda;
        LambdaTrial t;
        t.lambda = lambda;
        t.result = train_mask(params, records, cfg);
        t.score = scorer ? scorer(t.result.mask, t.result) : 0.0;
        sweep.trials.push_back(std::move(t));
    }
    for (std::size_t i = 1; i < sweep.trials.size(); ++i) {
        if (sweep.trials[i].score > sweep.trials[sweep.best].score) sweep.best = i;
    }
    return sweep;
}

double mean_logit_difference(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                             const Mask* mask) {
    if (records.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& r : records) {
        const Logits l = forward(params, r.prefix, mask);
        const auto row = l.row_span(l.rows - 1);
        sum += static_cast<double>(row[static_cast<std::size_t>(r.desired)]) -
               static_cast<double>(row[static_cast<std::size_t>(r.undesired)]);
    }
    return sum / static_cast<double>(records.size());
}

double flip_rate(const Parameters& params, std::span<const ErrorLocalizationRecord> records, const Mask* mask) {
    if (records.empty()) return 0.0;
    int wins = 0;
    for (const auto& r : records) {
        const Logits l = forward(params, r.prefix, mask);
        const auto row = l.row_span(l.rows - 1);
        wins += row[static_cast<std::size_t>(r.desired)] > row[static_cast<std::size_t>(r.undesired)] ? 1 : 0;
    }
    return static_cast<double>(wins) / static_cast<double>(records.size());
}

MaskScorer flip_rate_scorer(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                            float threshold) {
    return [&params, records, threshold](const Mask& mask, const DcmResult&) {
        const Mask b = binary_mask(mask, threshold);
        return flip_rate(params, records, &b);
    };
}

void write_mask_json(const std::filesystem::path& path, const ModelConfig& cfg, const Mask& mask, float threshold,
                     const std::string& config_hash, double lambda) {
    const MaskReport r = mask_report(cfg, mask, threshold);
    json ids = json::array();
    for (const auto& id : selected_components(cfg, mask, threshold)) {
        ids.push_back({{"layer", id.layer}, {"kind", to_string(id.kind)}, {"index", id.index}});
    }
    const json j = {{"config", parse_key_values(cfg.to_text())},
                    {"config_hash", config_hash},
                    {"lambda", lambda},
                    {"threshold", threshold},
                    {"values", mask.values},
                    {"selected_component_ids", ids},
                    {"report",
                     {{"selected", r.selected},
                      {"total", r.total},
                      {"percentage", r.percentage},
                      {"q_heads", r.q_heads},
                      {"k_heads", r.k_heads},
                      {"v_heads", r.v_heads},
                      {"mlp_neurons", r.mlp_neurons}}}};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path.string());
    os << j.dump(1) << '\n';
}

Mask read_mask_json(const std::filesystem::path& path, float* threshold) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read " + path.string());
    try {
        const json j = json::parse(is);
        if (threshold) *threshold = j.at("threshold").get<float>();
        return Mask{j.at("values").get<std::vector<float>>()};
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::string mask_report_csv_header() { return "Configuration,Q Heads,K Heads,V Heads,MLP Neurons,Selected,Total,% Mask"; }

std::string mask_report_csv_row(const std::string& label, const MaskReport& r) {
    std::ostringstream os;
    os << label << ',' << r.q_heads << ',' << r.k_heads << ',' << r.v_heads << ',' << r.mlp_neurons << ','
       << r.selected << ',' << r.total << ',' << r.percentage * 100.0;
    return os.str();
}

}  // namespace cca
