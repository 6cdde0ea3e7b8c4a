#include "cca/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace cca {

std::vector<Instance> pretraining_pool(const Corpus& corpus, int per_template, std::uint64_t seed) {
    std::set<std::string> taken;
    for (const auto& inst : corpus.instances) taken.insert(inst.question);
    std::vector<Instance> pool;
    for (const auto& t : corpus.templates) {
        Rng rng(derive_seed(seed, {0x9e7, static_cast<std::uint64_t>(t.template_id)}));
        int made = 0;
        // distinct questions are plentiful; the attempt cap guards tiny slot ranges
        for (int attempt = 0; made < per_template && attempt < 50 * per_template; ++attempt) {
            Instance inst = sample_instance(t, -1, rng);
            if (!taken.insert(inst.question).second) continue;
            pool.push_back(std::move(inst));
            ++made;
        }
    }
    return pool;
}

std::vector<Instance> monitor_subset(const Corpus& corpus, int size) {
    std::vector<Instance> train;
    for (const auto& inst : corpus.instances) {
        if (inst.split == Split::train) train.push_back(inst);
    }
    if (size <= 0 || static_cast<std::size_t>(size) >= train.size()) return train;
    std::vector<Instance> out;
    const double stride = static_cast<double>(train.size()) / size;
    for (int i = 0; i < size; ++i) out.push_back(train[static_cast<std::size_t>(i * stride)]);
    return out;
}

PretrainResult pretrain(const ModelConfig& model, const Tokenizer& tok, const Corpus& corpus,
                        std::span<const ControlSuite> controls, const PretrainConfig& cfg,
                        const PretrainObserver& observer) {
    model.validate();
    if (model.vocab_size != tok.size()) {
        throw ShapeError("model vocabulary does not match the tokenizer");
    }
    if (cfg.batch_size < 1 || cfg.max_steps < 1 || cfg.eval_every < 1) {
        throw InputError("invalid pretraining configuration");
    }
    std::vector<LmSequence> math;
    for (const auto& inst : pretraining_pool(corpus, cfg.pool_per_template, derive_seed(cfg.seed, {0x9e6}))) {
        math.push_back(math_sequence(tok, inst));
    }
    std::vector<LmSequence> ctrl;
    for (const auto& s : controls) {
        for (const auto& ex : s.train) ctrl.push_back(control_sequence(tok, ex));
    }
    if (math.empty()) {
        throw InputError("pretraining pool is empty");
    }
    for (const auto* set : {&math, &ctrl}) {
        for (const auto& s : *set) {
            if (static_cast<int>(s.tokens.size()) > model.max_seq_len) {
                throw LengthError("pretraining sequence longer than the model context");
            }
        }
    }
    const std::vector<Instance> monitor = monitor_subset(corpus, cfg.monitor_size);
    EvalOptions eval_opts;
    eval_opts.max_length = cfg.max_length;

    PretrainResult res;
    Parameters p = init_parameters(model);
    const std::size_t n = p.size();
    std::vector<float> m1(n, 0.0f), m2(n, 0.0f);
    Gradients grads;
    GradRequest req;
    Rng rng(derive_seed(cfg.seed, {0x9e8}));
    std::optional<Parameters> last_in_band;
    double last_in_band_acc = 0.0;
    int last_in_band_step = 0;
    double loss_since = 0.0;
    int batches_since = 0;

    for (int step = 0; step < cfg.max_steps; ++step) {
        grads.params.assign(n, 0.0f);
        double loss = 0.0;
        for (int k = 0; k < cfg.batch_size; ++k) {
            const bool use_ctrl = !ctrl.empty() && rng.uniform() < cfg.control_fraction;
            const auto& pool = use_ctrl ? ctrl : math;
            const auto& seq = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
            const ForwardPass pass = forward_with_cache(p, seq.tokens);
            Logits dlogits;
            loss += cross_entropy_loss(seq.targets)(pass.logits, dlogits);
            backward(p, pass, dlogits, req, grads);
        }
        const float inv = 1.0f / static_cast<float>(cfg.batch_size);
        loss *= inv;
        if (!std::isfinite(loss)) {
            throw NumericError("pretraining loss is not finite at step " + std::to_string(step), -1);
        }
        double norm2 = 0.0;
        for (float& g : grads.params) {
            g *= inv;
            norm2 += static_cast<double>(g) * g;
        }
        const double norm = std::sqrt(norm2);
        const float clip = norm > cfg.max_grad_norm ? static_cast<float>(cfg.max_grad_norm / norm) : 1.0f;
        const double lr = step < cfg.warmup_steps ? cfg.learning_rate * (step + 1) / cfg.warmup_steps : cfg.learning_rate;
        const int t = step + 1;
        const float bc1 = static_cast<float>(1.0 - std::pow(0.9, t));
        const float bc2 = static_cast<float>(1.0 - std::pow(0.999, t));
        const float lr_f = static_cast<float>(lr);
        const float decay = static_cast<float>(1.0 - lr * cfg.weight_decay);
        auto w = p.values();
        for (std::size_t i = 0; i < n; ++i) {
            const float g = grads.params[i] * clip;
            m1[i] = 0.9f * m1[i] + 0.1f * g;
            m2[i] = 0.999f * m2[i] + 0.001f * g * g;
            w[i] = w[i] * decay - lr_f * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + 1e-8f);
        }
        loss_since += loss;
        ++batches_since;

        if (t % cfg.eval_every != 0 && t != cfg.max_steps) continue;
        PretrainCheck check;
        check.step = t;
        check.loss = loss_since / batches_since;
        check.accuracy = evaluate(p, tok, monitor, "monitor", eval_opts).accuracy;
        loss_since = 0.0;
        batches_since = 0;
        res.checks.push_back(check);
        if (observer) observer(check);
        const bool in_band = check.accuracy >= cfg.band_low && check.accuracy <= cfg.band_high;
        if (in_band) {
            last_in_band = p;
            last_in_band_acc = check.accuracy;
            last_in_band_step = t;
        }
        if (in_band && check.accuracy >= cfg.stop_at) break;
    }
    if (last_in_band) {
        res.params = std::move(*last_in_band);
        res.accuracy = last_in_band_acc;
        res.steps = last_in_band_step;
        res.in_band = true;
    } else {
        res.params = std::move(p);
        res.accuracy = res.checks.empty() ? 0.0 : res.checks.back().accuracy;
        res.steps = res.checks.empty() ? 0 : res.checks.back().step;
    }
    return res;
}

}  // namespace cca
