#include "cca/amplify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace cca {

void AmplifyConfig::validate() const {
    if (steps < 1 || cadence.empty() || !std::is_sorted(cadence.begin(), cadence.end()) ||
        std::adjacent_find(cadence.begin(), cadence.end()) != cadence.end() || cadence.front() < 1 ||
        cadence.back() > steps) {
        throw InputError("validation cadence must be sorted, unique and within [1, steps]");
    }
}

namespace {

int last_position(const ErrorLocalizationRecord& r) { return static_cast<int>(r.prefix.size()) - 1; }

/// Full-batch loss; when `grads` is set, also the summed (not averaged) gradient.
double full_batch(const Parameters& params, std::span<const ErrorLocalizationRecord> records, const GradRequest& req,
                  Gradients* grads) {
    double loss = 0.0;
    Logits dlogits;
    for (const auto& r : records) {
        const LossFn fn = logit_difference_loss(last_position(r), r.desired, r.undesired);
        if (grads == nullptr) {
            const Logits l = forward(params, r.prefix);
            loss += fn(l, dlogits);
            continue;
        }
        const ForwardPass pass = forward_with_cache(params, r.prefix);
        dlogits = Logits{};
        loss += fn(pass.logits, dlogits);
        backward(params, pass, dlogits, req, *grads);
    }
    loss /= static_cast<double>(records.size());
    if (!std::isfinite(loss)) {
        throw NumericError("amplification loss is not finite", -1);
    }
    return loss;
}

std::vector<std::size_t> scope_offsets(const Parameters& params, const UpdateScope& scope) {
    std::vector<std::size_t> out;
    for (const auto& id : scope.components) {
        component_slice(params, id).for_each([&](std::size_t i) { out.push_back(i); });
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

bool better(double val, double lr, double best_val, double best_lr) {
    return val > best_val || (val == best_val && lr < best_lr);
}

}  // namespace

double amplification_loss(const Parameters& params, std::span<const ErrorLocalizationRecord> records) {
    if (records.empty()) {
        throw InputError("amplification needs at least one record");
    }
    return full_batch(params, records, {}, nullptr);
}

UpdateResult targeted_update(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                             const UpdateScope& scope, double learning_rate, const AmplifyConfig& cfg,
                             const Validator& validate) {
    cfg.validate();
    if (records.empty()) {
        throw InputError("amplification needs at least one record");
    }
    if (!scope.all_weights && scope.components.empty()) {
        throw InputError("targeted update needs at least one component");
    }
    if (!validate) {
        throw InputError("targeted update needs a validator");
    }
    GradRequest req;
    req.params = scope.all_weights ? GradRequest::Params::all : GradRequest::Params::components;
    req.components = scope.components;
    const std::vector<std::size_t> offsets = scope.all_weights ? std::vector<std::size_t>{} : scope_offsets(params, scope);

    UpdateResult res;
    res.learning_rate = learning_rate;
    Parameters cur = params;
    Gradients grads;
    const float scale = static_cast<float>(learning_rate / static_cast<double>(records.size()));
    std::size_t next_eval = 0;

    for (int step = 0;; ++step) {
        StepLogEntry e;
        e.step = step;
        if (next_eval < cfg.cadence.size() && cfg.cadence[next_eval] == step) {
            ++next_eval;
            e.val_accuracy = validate(cur);
            if (*e.val_accuracy > res.best_val) {  // strict: earliest step keeps ties
                res.best_val = *e.val_accuracy;
                res.best_step = step;
                res.best = cur;
            }
        }
        if (step == cfg.steps) {
            e.train_loss = full_batch(cur, records, req, nullptr);
            res.log.push_back(e);
            break;
        }
        grads.params.assign(cur.size(), 0.0f);
        e.train_loss = full_batch(cur, records, req, &grads);
        res.log.push_back(e);
        auto w = cur.values();
        if (scope.all_weights) {
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= scale * grads.params[i];
        } else {
            for (std::size_t i : offsets) w[i] -= scale * grads.params[i];
        }
    }
    return res;
}

LrSweep sweep_lr(const Parameters& params, std::span<const ErrorLocalizationRecord> records, const UpdateScope& scope,
                 const AmplifyConfig& cfg, const Validator& validate) {
    if (cfg.lr_candidates.empty()) {
        throw InputError("learning-rate sweep needs at least one candidate");
    }
    LrSweep sweep;
    bool any = false;
    for (double lr : cfg.lr_candidates) {
        LrTrial t;
        t.learning_rate = lr;
        try {
            UpdateResult r = targeted_update(params, records, scope, lr, cfg, validate);
            t.best_val = r.best_val;
            t.best_step = r.best_step;
            if (!any || better(r.best_val, lr, sweep.best.best_val, sweep.best.learning_rate)) {
                sweep.best = std::move(r);
                any = true;
            }
        } catch (const NumericError&) {
            t.diverged = true;
        }
        sweep.trials.push_back(t);
    }
    if (!any) {
        throw NumericError("every learning-rate candidate diverged", -1);
    }
    return sweep;
}

LrSweep ablation_no_mask(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                         const AmplifyConfig& cfg, const Validator& validate) {
    return sweep_lr(params, records, UpdateScope::everything(), cfg, validate);
}

MaskScorer dry_run_scorer(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                          const AmplifyConfig& cfg, double learning_rate, float threshold, const Validator& validate) {
    return [&params, records, cfg, learning_rate, threshold, validate](const Mask& mask, const DcmResult&) {
        auto support = selected_components(params.config(), mask, threshold);
        if (support.empty()) return validate(params);
        try {
            return targeted_update(params, records, UpdateScope::of(std::move(support)), learning_rate, cfg, validate)
                .best_val;
        } catch (const NumericError&) {
            return -1.0;
        }
    };
}

void write_step_log_csv(const std::filesystem::path& path, std::span<const StepLogEntry> log) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path.string());
    os << "step,train_loss,val_accuracy\n";
    os.precision(9);
    for (const auto& e : log) {
        os << e.step << ',' << e.train_loss << ',';
        if (e.val_accuracy) os << *e.val_accuracy;
        os << '\n';
    }
}

// ----------------------------------------------------------------------------

double lora_schedule(double peak, int step, int warmup, int total) {
    if (step < warmup) {
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    const int span = std::max(1, total - warmup);
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Parameters merged(const Parameters& base, const LoraAdapters& adapters) {
    Parameters p = base;
    adapters.merge_into(p);
    return p;
}

namespace {

std::vector<LmSequence> lm_examples(const Tokenizer& tok, std::span<const Instance> train, int max_len) {
    std::vector<LmSequence> out;
    out.reserve(train.size());
    for (const auto& inst : train) {
        out.push_back(math_sequence(tok, inst));
        if (static_cast<int>(out.back().tokens.size()) > max_len) {
            throw LengthError("training sequence longer than the model context");
        }
    }
    return out;
}

}  // namespace

LoraResult lora_train(const Parameters& base, const Tokenizer& tok, std::span<const Instance> train,
                      const LoraConfig& cfg, double learning_rate, const Validator& validate) {
    if (train.empty()) {
        throw InputError("adapter training needs at least one instance");
    }
    if (cfg.batch_size < 1 || cfg.epochs < 1 || cfg.eval_every < 1) {
        throw InputError("invalid adapter training configuration");
    }
    const std::vector<LmSequence> data = lm_examples(tok, train, base.config().max_seq_len);
    LoraAdapters ad(base.config(), cfg.rank, cfg.alpha, cfg.dropout);
    ad.init(derive_seed(cfg.seed, {0x10a}));

    const int per_epoch = static_cast<int>((data.size() + cfg.batch_size - 1) / cfg.batch_size);
    const int total = per_epoch * cfg.epochs;
    const std::size_t n = ad.values().size();
    std::vector<double> m1(n, 0.0), m2(n, 0.0), g(n);
    GradRequest req;
    req.params = GradRequest::Params::none;
    req.adapters = true;

    LoraResult res;
    res.learning_rate = learning_rate;
    std::vector<std::size_t> order(data.size());
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, {0x10b, static_cast<std::uint64_t>(epoch)}));
        rng.shuffle(order);
        for (int b = 0; b < per_epoch; ++b) {
            const std::size_t lo = static_cast<std::size_t>(b) * cfg.batch_size;
            const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
            std::fill(g.begin(), g.end(), 0.0);
            double loss = 0.0;
            for (std::size_t k = lo; k < hi; ++k) {
                const LmSequence& ex = data[order[k]];
                ForwardOptions opt;
                opt.adapters = &ad;
                opt.adapter_dropout = true;
                opt.dropout_seed = derive_seed(cfg.seed, {0x10c, static_cast<std::uint64_t>(step), k - lo});
                const auto lg = loss_and_gradients(base, ex.tokens, cross_entropy_loss(ex.targets), req, opt);
                loss += lg.loss;
                for (std::size_t i = 0; i < n; ++i) g[i] += lg.grads.adapters[i];
            }
            const double inv = 1.0 / static_cast<double>(hi - lo);
            loss *= inv;
            if (!std::isfinite(loss)) {
                throw NumericError("adapter training loss is not finite at step " + std::to_string(step), -1);
            }
            double norm2 = 0.0;
            for (double& v : g) {
                v *= inv;
                norm2 += v * v;
            }
            const double norm = std::sqrt(norm2);
            const double clip = norm > cfg.max_grad_norm ? cfg.max_grad_norm / norm : 1.0;

            const double lr = lora_schedule(learning_rate, step, cfg.warmup_steps, total);
            const int t = step + 1;
            const double bc1 = 1.0 - std::pow(cfg.beta1, t);
            const double bc2 = 1.0 - std::pow(cfg.beta2, t);
            auto w = ad.values();
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = g[i] * clip;
                m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * gi;
                m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * gi * gi;
                double v = w[i];
                v -= lr * cfg.weight_decay * v;  // decoupled decay
                v -= lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + cfg.epsilon);
                w[i] = static_cast<float>(v);
            }
            ++step;

            StepLogEntry e;
            e.step = step;
            e.train_loss = loss;
            if (step % cfg.eval_every == 0 || step == total) {
                e.val_accuracy = validate(merged(base, ad));
                if (*e.val_accuracy > res.best_val) {
                    res.best_val = *e.val_accuracy;
                    res.best_step = step;
                    res.adapters = ad;
                }
            }
            res.log.push_back(e);
        }
    }
    return res;
}

LoraResult lora_baseline(const Parameters& base, const Tokenizer& tok, std::span<const Instance> train,
                         const LoraConfig& cfg, const Validator& validate) {
    if (cfg.lr_candidates.empty()) {
        throw InputError("adapter sweep needs at least one candidate");
    }
    LoraResult best;
    bool any = false;
    std::vector<LrTrial> trials;
    for (double lr : cfg.lr_candidates) {
        LrTrial t;
        t.learning_rate = lr;
        try {
            LoraResult r = lora_train(base, tok, train, cfg, lr, validate);
            t.best_val = r.best_val;
            t.best_step = r.best_step;
            if (!any || better(r.best_val, lr, best.best_val, best.learning_rate)) {
                best = std::move(r);
                any = true;
            }
        } catch (const NumericError&) {
            t.diverged = true;
        }
        trials.push_back(t);
    }
    if (!any) {
        throw NumericError("every adapter learning rate diverged", -1);
    }
    best.trials = std::move(trials);
    return best;
}

}  // namespace cca
