#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cca/amplify.hpp"
#include "cca/dcm.hpp"
#include "cca/eval_harness.hpp"
#include "cca/localization.hpp"
#include "cca/pretrain.hpp"
#include "cca/trace_engine.hpp"

namespace cca {

/// Every knob of a run. Flat "section.key" names; the canonical text (sorted
/// key=value lines) is hashed to pin the run directory.
struct RunConfig {
    std::uint64_t seed = 1;  // corpus, model init and pretraining
    std::vector<std::uint64_t> experiment_seeds = {1, 2, 3};
    int n_templates = 100;
    int instances_per_template = 50;
    double filter_threshold = 0.8;
    int max_length = 128;  // generation cap shared by every decode
    std::vector<LocalizationMethod> methods = {LocalizationMethod::prefix, LocalizationMethod::branching};
    std::vector<std::string> configurations = {"cca_mask", "cca_nomask", "lora"};
    int control_train = 2000;
    int control_eval = 200;
    int max_records = 128;  // localization records fed to dcm and amplify; 0 keeps every record

    ModelConfig model = toy_model();
    PretrainConfig pretrain;
    PairConfig pairs;
    DcmConfig dcm;
    std::vector<double> lambdas = default_lambda_candidates();
    std::string lambda_scorer = "dry_run";  // or "flip_rate"
    double dry_run_lr = 1e-2;
    AmplifyConfig amplify;
    LoraConfig lora;
    EvalOptions eval;

    static ModelConfig toy_model();

    std::map<std::string, std::string> to_map() const;
    /// Applies "section.key" -> value overrides; throws InputError on unknown keys or bad values.
    void apply(const std::map<std::string, std::string>& kv);
    std::string canonical_text() const;
    std::string hash() const;
};

/// Reads an INI file (may be empty path), then applies CCA_SECTION_KEY
/// environment overrides for every known key.
RunConfig load_run_config(const std::filesystem::path& ini, const std::function<const char*(const char*)>& getenv);

enum class Stage { pretrain, gen_corpus, filter, traces, localize, dcm, amplify, lora, eval, report };
std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view s);
const std::vector<Stage>& all_stages();

/// An upstream artifact is missing; `stage()` names the stage to run first.
class DependencyError : public Error {
public:
    DependencyError(const std::string& what, Stage producer) : Error(what), producer_(producer) {}
    Stage producer() const noexcept { return producer_; }

private:
    Stage producer_;
};

/// The run directory was produced under a different configuration.
class StalenessError : public Error {
public:
    using Error::Error;
};

/// Restricts a stage to some methods, configurations or seeds; empty means all configured.
struct StageFilter {
    std::optional<LocalizationMethod> method;
    std::optional<std::string> configuration;
    std::optional<std::uint64_t> seed;
};

/// Table-1 label, e.g. "CCA w mask (Branching)" or "LoRA".
std::string configuration_label(const std::string& configuration, std::optional<LocalizationMethod> method);

class Pipeline {
public:
    using Logger = std::function<void(const std::string&)>;

    /// Takes the run-directory lock; throws StalenessError if the directory
    /// holds a different config hash and Error if another writer holds the lock.
    Pipeline(RunConfig cfg, std::filesystem::path run_dir, Logger log = {});
    ~Pipeline();
    Pipeline(const Pipeline&) = delete;
    Pipeline& operator=(const Pipeline&) = delete;

    void run(Stage stage, const StageFilter& filter = {});
    void run_all(const StageFilter& filter = {});

    const RunConfig& config() const { return cfg_; }
    const std::filesystem::path& dir() const { return dir_; }
    std::filesystem::path path(const std::string& artifact) const { return dir_ / artifact; }

private:
    void stage_pretrain();
    void stage_gen_corpus();
    void stage_filter();
    void stage_traces(const StageFilter& f);
    void stage_localize(const StageFilter& f);
    void stage_dcm(const StageFilter& f);
    void stage_amplify(const StageFilter& f);
    void stage_lora(const StageFilter& f);
    void stage_eval();
    void stage_report();

    /// Declares and checks an input of the running stage.
    std::filesystem::path need(const std::string& artifact, Stage producer);
    /// Records an output of the running stage.
    std::filesystem::path produce(const std::string& artifact);

    Parameters load_model();
    /// Deterministic subsample of one method/seed's records, shared by dcm and amplify.
    std::vector<ErrorLocalizationRecord> training_records(LocalizationMethod m, std::uint64_t s);
    Corpus load_corpus();
    std::vector<int> retained_templates();
    std::vector<Instance> split_of_retained(const Corpus& corpus, Split s);
    Validator val_validator(const Corpus& corpus);
    std::vector<std::uint64_t> seeds(const StageFilter& f) const;
    std::vector<LocalizationMethod> methods(const StageFilter& f) const;
    bool wants(const std::string& configuration, const StageFilter& f) const;
    void write_manifest();
    void say(const std::string& msg) const;

    RunConfig cfg_;
    std::filesystem::path dir_;
    std::string hash_;
    Logger log_;
    Tokenizer tok_;
    int lock_fd_ = -1;

    Stage current_ = Stage::pretrain;
    std::set<std::string> inputs_;
    std::set<std::string> outputs_;
};

}  // namespace cca
