#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "cca/trace_engine.hpp"

namespace cca {

enum class LocalizationMethod { prefix, branching };
std::string_view to_string(LocalizationMethod m);
LocalizationMethod method_from_string(std::string_view s);

/// Why a pair yields no record.
enum class PivotFailure { no_divergence, no_intervention_token, no_pivot, same_token };
std::string_view to_string(PivotFailure f);

class LocalizationError : public Error {
public:
    LocalizationError(PivotFailure reason, const std::string& what) : Error(what), reason_(reason) {}
    PivotFailure reason() const noexcept { return reason_; }

private:
    PivotFailure reason_;
};

/// Pivot location in generation coordinates: index 0 is the first generated
/// token. The intervention token sits at pivotal - 1 >= 0.
struct PivotResult {
    LocalizationMethod method = LocalizationMethod::prefix;
    int pivotal = 0;
    int intervention = 0;
    int divergence = 0;  // first generated index where the two traces differ
    TokenSeq prefix;     // prompt + generation up to and including the intervention token
    Token desired = 0;   // promotes the correct answer
    Token undesired = 0;
    int redecodes = 0;   // greedy completions run (branching only)
};

/// First generated index where the traces differ. Throws on no divergence.
int first_divergence(const TracePair& pair);

PivotResult prefix_pivot(const TracePair& pair);

struct BranchingConfig {
    int max_length = 0;  // decode cap shared with trace generation; 0 means max_seq_len
};

/// Scans the sampled trace from the first divergence for the earliest token
/// whose inclusion moves the greedy completion out of the greedy trace's class.
PivotResult branching_pivot(const TracePair& pair, const Decoder& decoder, const Tokenizer& tok,
                            const BranchingConfig& cfg = {});

/// Batched form; element i holds the pivot or the failure for pairs[i].
struct PivotOutcome {
    std::optional<PivotResult> pivot;
    std::optional<PivotFailure> failure;
};
std::vector<PivotOutcome> branching_pivots(std::span<const TracePair> pairs, const Decoder& decoder,
                                           const Tokenizer& tok, const BranchingConfig& cfg = {});

/// f(prefix): is the greedy completion of `prefix` exactly correct?
bool completes_correctly(const Decoder& decoder, const Tokenizer& tok, std::span<const Token> prefix,
                         std::int64_t gold, int max_length = 0);

struct ErrorLocalizationRecord {
    int instance_id = 0;
    LocalizationMethod method = LocalizationMethod::prefix;
    TokenSeq prefix;
    Token desired = 0;
    Token undesired = 0;
    int pivotal = 0;
};

struct DatasetReport {
    int pairs = 0;
    int records = 0;
    std::map<PivotFailure, int> skipped;
};

struct ErrorLocalizationDataset {
    std::vector<ErrorLocalizationRecord> records;
    DatasetReport report;
};

ErrorLocalizationDataset build_dataset(std::span<const TracePair> pairs, LocalizationMethod method,
                                       const Decoder& decoder, const Tokenizer& tok, const BranchingConfig& cfg = {});

void write_records_jsonl(const std::filesystem::path& path, const std::vector<ErrorLocalizationRecord>& records,
                         const std::string& config_hash);
std::vector<ErrorLocalizationRecord> read_records_jsonl(const std::filesystem::path& path);

}  // namespace cca
