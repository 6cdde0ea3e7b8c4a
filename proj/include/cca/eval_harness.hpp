#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cca/dcm.hpp"
#include "cca/taskgen.hpp"
#include "cca/trace_engine.hpp"

namespace cca {

struct EvalOptions {
    int batch_size = 64;  // sequences decoded in lockstep
    int max_length = 0;   // absolute cap on prompt + continuation; 0 means max_seq_len
};

struct EvalResult {
    std::string dataset;
    double accuracy = 0.0;
    int n = 0;
    int correct = 0;  // accuracy * n
    std::map<int, double> per_template;
    std::uint64_t seed = 0;
    std::vector<int> instance_ids;  // evaluation order
    std::vector<bool> flags;        // co-indexed with instance_ids
};

/// Greedy exact match: an instance counts iff decoding ends with <eos> and
/// the integer after the final marker equals the gold answer.
EvalResult evaluate(const Parameters& params, const Tokenizer& tok, std::span<const Instance> instances,
                    const std::string& dataset = "", const EvalOptions& opts = {});

/// instance_id -> correct, the input filter_templates expects.
std::map<int, bool> correctness(const EvalResult& r);

/// Greedy decode of each prompt; correct iff the continuation is exactly the
/// target followed by <eos>.
double control_accuracy(const Parameters& params, const Tokenizer& tok, std::span<const ControlExample> examples,
                        const EvalOptions& opts = {});

/// Task name -> accuracy on each suite's eval portion.
std::map<std::string, double> evaluate_controls(const Parameters& params, const Tokenizer& tok,
                                                std::span<const ControlSuite> suites, const EvalOptions& opts = {});

// ----------------------------------------------------------------------------
// Aggregation and reports. Accuracies enter as fractions; every reported
// accuracy, std and delta is on the 0-100 scale.

struct SeedStats {
    double mean = 0.0;
    std::optional<double> std;  // sample (n - 1) estimator; present iff n >= 2
    int n = 0;
};

SeedStats seed_stats(std::span<const double> values);

/// One configuration evaluated under several experiment seeds.
struct ConfigurationRun {
    std::string configuration;  // e.g. "CCA w mask (Branching)"
    int dataset_size = 0;       // training examples consumed (records or instances)
    std::optional<double> mask_fraction;
    std::vector<double> test_accuracy;                       // per seed
    std::vector<std::map<std::string, double>> control_accuracy;  // per seed
};

struct ReportRow {
    std::string configuration;
    std::string dataset;
    std::optional<int> dataset_size;
    std::optional<double> mask_percent;
    double accuracy = 0.0;
    std::optional<double> std;
    double delta = 0.0;  // mean updated minus original
    std::map<std::string, double> control_deltas;
    int n_seeds = 0;
};

struct ExperimentReport {
    std::string config_hash;
    std::string dataset;
    std::vector<std::string> control_tasks;
    std::vector<ReportRow> rows;  // runs in input order, original last
    std::vector<std::pair<std::string, MaskReport>> masks;
};

/// Throws InputError when a run has no seeds or seed counts disagree
/// between test and control accuracies.
ExperimentReport compare_configurations(double original_test_accuracy,
                                        const std::map<std::string, double>& original_controls,
                                        std::span<const ConfigurationRun> runs, const std::string& dataset);

const std::vector<std::string>& table1_columns();
const std::vector<std::string>& table9_columns();

std::string table1_csv(const ExperimentReport& r);
std::string table2_csv(const ExperimentReport& r);
std::string table9_csv(const ExperimentReport& r);
std::string report_markdown(const ExperimentReport& r);
nlohmann::json report_json(const ExperimentReport& r);

/// Throws FormatError naming the first missing column or mistyped field.
void validate_report_json(const nlohmann::json& j);

/// table1.csv, table2.csv, table9.csv, report.md and report.json under `dir`.
void write_report(const std::filesystem::path& dir, const ExperimentReport& r);

/// Throws InputError when any consumed id belongs to a test-split instance.
void check_split_hygiene(const Corpus& corpus, std::span<const int> consumed_ids, const std::string& artifact);

}  // namespace cca
