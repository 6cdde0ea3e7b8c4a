#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "cca/localization.hpp"
#include "cca/transformer.hpp"

namespace cca {

struct DcmConfig {
    double learning_rate = 5e-3;
    int epochs = 50;
    int batch_size = 8;
    double lambda = 1e-3;
    double early_stop_fraction = 0.2;
    float threshold = 0.5f;
    float init_value = 0.5f;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
};

/// Selected-component statistics in the per-kind layout of a component table.
struct MaskReport {
    int selected = 0;
    int total = 0;
    double percentage = 0.0;  // selected / total, in [0, 1]
    int q_heads = 0;
    int k_heads = 0;
    int v_heads = 0;
    int mlp_neurons = 0;
};

/// -(logit[desired] - logit[undesired]) + lambda * sum(mask).
double dcm_loss(std::span<const float> logits, Token desired, Token undesired, const Mask& mask, double lambda);

/// Component indices with value >= threshold.
std::vector<int> binarize(const Mask& mask, float threshold);
std::vector<ComponentId> selected_components(const ModelConfig& cfg, const Mask& mask, float threshold);
MaskReport mask_report(const ModelConfig& cfg, const Mask& mask, float threshold);

struct DcmResult {
    Mask mask;
    MaskReport report;
    int steps = 0;
    int epochs_run = 0;  // epochs started
    bool early_stopped = false;
    std::vector<double> batch_losses;
};

/// Called after every optimizer step with the step index and the mask.
using DcmObserver = std::function<void(int step, const Mask& mask)>;

/// Optimizes the mask with Adam on the masked forward pass; the model is
/// never written. Throws NumericError on a non-finite loss.
DcmResult train_mask(const Parameters& params, std::span<const ErrorLocalizationRecord> records, const DcmConfig& cfg,
                     const DcmObserver& observer = {});

/// Higher is better. Evaluated on the binarized mask of each candidate.
using MaskScorer = std::function<double(const Mask& mask, const DcmResult& result)>;

struct LambdaTrial {
    double lambda = 0.0;
    DcmResult result;
    double score = 0.0;
};

struct LambdaSweep {
    std::vector<LambdaTrial> trials;
    std::size_t best = 0;  // first candidate reaching the top score
};

LambdaSweep sweep_lambda(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                         const DcmConfig& base, std::span<const double> candidates, const MaskScorer& scorer);

const std::vector<double>& default_lambda_candidates();

/// Mean logit difference (desired - undesired) at each record's last position.
double mean_logit_difference(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                             const Mask* mask = nullptr);

/// Fraction of records whose desired token outscores the undesired one.
double flip_rate(const Parameters& params, std::span<const ErrorLocalizationRecord> records, const Mask* mask = nullptr);

/// Update-free scorer: flip rate under the binarized mask (selected
/// components doubled). Raw logit gain would grow with every extra
/// component, so ties are left to the candidate order, largest lambda first.
MaskScorer flip_rate_scorer(const Parameters& params, std::span<const ErrorLocalizationRecord> records,
                            float threshold);

/// Binarized mask: 1 for selected components, 0 elsewhere.
Mask binary_mask(const Mask& mask, float threshold);

void write_mask_json(const std::filesystem::path& path, const ModelConfig& cfg, const Mask& mask, float threshold,
                     const std::string& config_hash, double lambda);
Mask read_mask_json(const std::filesystem::path& path, float* threshold = nullptr);

/// CSV with one row per mask: configuration, Q/K/V head and MLP neuron counts.
std::string mask_report_csv_header();
std::string mask_report_csv_row(const std::string& label, const MaskReport& r);

}  // namespace cca
