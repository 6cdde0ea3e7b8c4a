#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "cca/dcm.hpp"
#include "cca/localization.hpp"
#include "cca/taskgen.hpp"
#include "cca/transformer.hpp"

namespace cca {

/// Validation exact-match accuracy of a parameter set, in [0, 1].
using Validator = std::function<double(const Parameters& params)>;

struct AmplifyConfig {
    int steps = 50;
    std::vector<double> lr_candidates = {1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5};
    std::vector<int> cadence = {2, 4, 6, 8, 10, 20, 30, 40, 50};
    std::uint64_t seed = 0;

    /// Throws InputError unless the cadence is non-empty, sorted, unique and within [1, steps].
    void validate() const;
};

struct StepLogEntry {
    int step = 0;
    double train_loss = 0.0;  // targeted updates: full-dataset loss after `step` updates; adapters: batch loss
    std::optional<double> val_accuracy;  // set on evaluation steps only
};

struct UpdateResult {
    Parameters best;
    int best_step = 0;
    double best_val = -std::numeric_limits<double>::infinity();
    double learning_rate = 0.0;
    std::vector<StepLogEntry> log;
};

/// Which weights a targeted update may touch.
struct UpdateScope {
    std::vector<ComponentId> components;
    bool all_weights = false;  // every transformer weight, embeddings and norms included

    static UpdateScope of(std::vector<ComponentId> ids) { return {std::move(ids), false}; }
    static UpdateScope everything() { return {{}, true}; }
};

/// Mean over records of -(logit_desired - logit_undesired) at the last prefix position.
double amplification_loss(const Parameters& params, std::span<const ErrorLocalizationRecord> records);

/// Full-batch plain gradient descent for cfg.steps steps at one learning
/// rate. Parameters outside the scope are never written. Validation runs on
/// the cadence; the best checkpoint is the earliest step with the top score.
/// Throws NumericError on a non-finite loss or gradient.
UpdateResult targeted_update(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                             const UpdateScope& scope, double learning_rate, const AmplifyConfig& cfg,
                             const Validator& validate);

struct LrTrial {
    double learning_rate = 0.0;
    bool diverged = false;
    double best_val = -std::numeric_limits<double>::infinity();
    int best_step = 0;
};

struct LrSweep {
    UpdateResult best;
    std::vector<LrTrial> trials;
};

/// One targeted_update per candidate from the same start. Divergent runs are
/// disqualified; equal scores go to the smaller learning rate. Throws
/// NumericError when every candidate diverges.
LrSweep sweep_lr(const Parameters& params, std::span<const ErrorLocalizationRecord> records, const UpdateScope& scope,
                 const AmplifyConfig& cfg, const Validator& validate);

/// Same protocol with every weight trainable.
LrSweep ablation_no_mask(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                         const AmplifyConfig& cfg, const Validator& validate);

/// Lambda-sweep scorer: best validation accuracy of a targeted update on the
/// binarized mask's components at one learning rate. An empty support scores
/// the unmodified model.
MaskScorer dry_run_scorer(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                          const AmplifyConfig& cfg, double learning_rate, float threshold, const Validator& validate);

void write_step_log_csv(const std::filesystem::path& path, std::span<const StepLogEntry> log);

// ----------------------------------------------------------------------------
// Low-rank adapter baseline

struct LoraConfig {
    int rank = 16;
    float alpha = 32.0f;
    float dropout = 0.1f;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double max_grad_norm = 1.0;
    int warmup_steps = 5;
    int epochs = 2;
    int batch_size = 32;
    int eval_every = 10;
    std::vector<double> lr_candidates = {3e-5, 5e-5, 1e-4, 3e-4};
    std::uint64_t seed = 0;
};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to 0 at `total`.
/// `step` counts from 0.
double lora_schedule(double peak, int step, int warmup, int total);

struct LoraResult {
    LoraAdapters adapters;  // best checkpoint
    double learning_rate = 0.0;
    int best_step = 0;
    double best_val = -std::numeric_limits<double>::infinity();
    std::vector<StepLogEntry> log;
    std::vector<LrTrial> trials;
};

/// Trains adapters with next-token cross-entropy on the gold continuation of
/// each instance; the base weights stay fixed. Validation on merged weights
/// every eval_every steps and after the last step.
LoraResult lora_train(const Parameters& base, const Tokenizer& tok, std::span<const Instance> train,
                      const LoraConfig& cfg, double learning_rate, const Validator& validate);

/// lora_train over every candidate rate; best validation wins, ties to the smaller rate.
LoraResult lora_baseline(const Parameters& base, const Tokenizer& tok, std::span<const Instance> train,
                         const LoraConfig& cfg, const Validator& validate);

/// Copy of `base` with the adapters merged in.
Parameters merged(const Parameters& base, const LoraAdapters& adapters);

}  // namespace cca
