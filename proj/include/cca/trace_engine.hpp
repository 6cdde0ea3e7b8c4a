#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "cca/taskgen.hpp"
#include "cca/transformer.hpp"

namespace cca {

enum class DecodeMode { greedy, sampled };

struct DecodeSpec {
    DecodeMode mode = DecodeMode::greedy;
    double temperature = 1.0;  // sampled mode; <= 0 falls back to argmax
    std::uint64_t seed = 0;
    int max_length = 0;  // absolute cap on prompt + continuation; 0 means max_seq_len
};

struct Trace {
    TokenSeq tokens;  // prompt followed by the generated continuation
    int prompt_length = 0;
    DecodeSpec spec;
    bool finished = false;  // ended with <eos> rather than the length cap
    std::optional<std::int64_t> answer;

    std::span<const Token> continuation() const {
        return std::span<const Token>(tokens).subspan(static_cast<std::size_t>(prompt_length));
    }
};

/// Exact-match class of a trace: the answer equals gold and decoding ended
/// with <eos>. A trace cut off by the length cap is never correct.
bool answer_correct(const Trace& trace, std::int64_t gold);

/// Argmax with the lowest token id winning ties.
Token greedy_token(std::span<const float> logits);
/// Draw from softmax(logits / temperature).
Token sample_token(std::span<const float> logits, double temperature, Rng& rng);

/// Throws LengthError when the prompt leaves no room to generate.
Trace decode(const Decoder& decoder, const Tokenizer& tok, std::span<const Token> prompt, const DecodeSpec& spec);

/// Decodes every prompt in lockstep; result i equals decode(prompts[i], specs[i]).
std::vector<Trace> decode_batch(const Decoder& decoder, const Tokenizer& tok, std::span<const TokenSeq> prompts,
                                std::span<const DecodeSpec> specs);

// ----------------------------------------------------------------------------
// Trace pairs

enum class Orientation { greedy_correct, greedy_incorrect };
std::string_view to_string(Orientation o);
Orientation orientation_from_string(std::string_view s);

struct TracePair {
    int instance_id = 0;
    std::int64_t gold_answer = 0;
    Orientation orientation = Orientation::greedy_correct;
    int prompt_length = 0;
    TokenSeq correct;    // prompt + continuation whose answer equals gold
    TokenSeq incorrect;  // prompt + continuation with any other (or no) answer
    int attempt = 0;     // sampling attempt that produced the counterfactual (1-based)
};

struct PairConfig {
    int max_resamples = 8;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    int max_length = 0;
};

/// Seed of sampling attempt `attempt` for one instance.
std::uint64_t pair_seed(std::uint64_t master, int instance_id, int attempt);

std::optional<TracePair> make_trace_pair(const Decoder& decoder, const Tokenizer& tok, const Instance& instance,
                                         const PairConfig& cfg);

/// Batched over instances; element i equals make_trace_pair(instances[i]).
std::vector<std::optional<TracePair>> make_trace_pairs(const Decoder& decoder, const Tokenizer& tok,
                                                       std::span<const Instance> instances, const PairConfig& cfg);

void write_trace_pairs_jsonl(const std::filesystem::path& path, const std::vector<TracePair>& pairs,
                             const std::string& config_hash);
std::vector<TracePair> read_trace_pairs_jsonl(const std::filesystem::path& path);

}  // namespace cca
