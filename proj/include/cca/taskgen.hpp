#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cca/common.hpp"

namespace cca {

// ----------------------------------------------------------------------------
// Tokenizer: whitespace-delimited words, digits split into one token each.

class Tokenizer {
public:
    static constexpr Token pad = 0;
    static constexpr Token bos = 1;
    static constexpr Token eos = 2;

    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> words);

    /// Every word used by the math templates and the control suites.
    static Tokenizer standard();

    int size() const { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }
    bool contains(const std::string& word) const { return ids_.count(word) != 0; }
    Token id(const std::string& word) const;
    const std::string& word(Token t) const;

    /// Throws InputError on an out-of-vocabulary word.
    TokenSeq encode(const std::string& text) const;
    /// Inverse of encode; adjacent digit tokens are joined into one number.
    std::string decode(std::span<const Token> tokens) const;

    bool is_digit(Token t) const { return t >= digit0_ && t < digit0_ + 10; }
    int digit_value(Token t) const { return t - digit0_; }
    Token digit(int v) const { return digit0_ + v; }
    Token answer_marker() const { return marker_; }

    std::uint64_t hash() const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, Token> ids_;
    Token digit0_ = -1;
    Token marker_ = -1;
};

// ----------------------------------------------------------------------------
// Math word-problem templates

enum class Op : char { add = '+', sub = '-', mul = '*' };

struct SlotRange {
    int lo = 0;
    int hi = 0;
};

/// One step of a template's gold program: acc = acc op operand, where the
/// operand is a slot value or a constant factor.
struct ProgramStep {
    Op op = Op::add;
    int slot = -1;     // -1 when the operand is `constant`
    int constant = 0;
};

struct Template {
    int template_id = 0;
    std::string subject;  // name whose count the question asks for
    std::string item;     // counted noun, first token of every gold trace
    std::vector<std::string> sentences;  // pattern with "{k}" slot placeholders
    std::vector<SlotRange> slots;
    int start_slot = 0;
    std::vector<ProgramStep> program;    // 2 to 5 steps
    std::vector<int> distractor_slots;   // slots that never enter the program
};

enum class Split { train, val, test, none };
std::string_view to_string(Split s);
Split split_from_string(std::string_view s);

struct Instance {
    int template_id = 0;
    int instance_id = 0;
    std::vector<int> values;  // one per template slot
    std::string question;
    std::string gold_trace;  // ends with "#### <answer>"
    std::int64_t answer = 0;
    Split split = Split::none;
};

struct Corpus {
    std::vector<Template> templates;
    std::vector<Instance> instances;
};

constexpr std::int64_t kAnswerLimit = 1'000'000;

/// Deterministic per seed. Templates depend only on (seed, template index).
std::vector<Template> generate_templates(int n_templates, std::uint64_t seed);

/// Samples slot values until the program stays within [0, kAnswerLimit).
Instance sample_instance(const Template& t, int instance_id, Rng& rng);

Corpus generate_corpus(int n_templates, int instances_per_template, std::uint64_t seed);

/// Evaluates a template program independently of the rendered trace.
std::int64_t run_program(const Template& t, const std::vector<int>& values);

/// Train/val/test sizes for n instances: round(0.52 n), floor(0.08 n), rest.
struct SplitSizes {
    int train = 0;
    int val = 0;
    int test = 0;
};
SplitSizes split_sizes(int n);

/// Assigns Instance::split per template using a seeded shuffle.
void split(Corpus& corpus, std::uint64_t seed);

/// Templates whose mean accuracy over the given per-instance results is below
/// `threshold`. `correct` is keyed by instance_id.
std::vector<int> filter_templates(const Corpus& corpus, const std::map<int, bool>& correct, Split on,
                                  double threshold);

/// Token-level prompt (<bos> + question) and gold continuation (trace + <eos>).
TokenSeq prompt_tokens(const Tokenizer& tok, const std::string& question);
TokenSeq continuation_tokens(const Tokenizer& tok, const std::string& trace);

/// One next-token training sequence; targets index the input position whose
/// logits predict them.
struct LmSequence {
    TokenSeq tokens;
    std::vector<std::pair<int, Token>> targets;
};

/// <bos> question followed by the gold trace and <eos>; only the continuation is trained.
LmSequence math_sequence(const Tokenizer& tok, const Instance& inst);

/// Integer after the final "####" marker, if digits follow it.
std::optional<std::int64_t> extract_answer(const Tokenizer& tok, std::span<const Token> tokens);
std::optional<std::int64_t> extract_answer(const std::string& text);

// ----------------------------------------------------------------------------
// Control suites (interference checks)

enum class ControlTask { copy, max, recall };
std::string_view to_string(ControlTask t);

struct ControlExample {
    ControlTask task = ControlTask::copy;
    std::string prompt;  // e.g. "copy : c a f ->"
    std::string target;  // e.g. "c a f"
};

struct ControlSuite {
    ControlTask task = ControlTask::copy;
    std::vector<ControlExample> train;
    std::vector<ControlExample> eval;
};

/// <bos> prompt followed by target and <eos>; only the target and <eos> are trained.
LmSequence control_sequence(const Tokenizer& tok, const ControlExample& ex);

std::vector<ControlSuite> generate_control_suites(std::uint64_t seed, int train_per_task = 2000,
                                                  int eval_per_task = 200);
ControlExample sample_control(ControlTask task, Rng& rng);

/// Lookup oracle for the recall task: value bound to the queried key.
std::string recall_lookup(const std::string& prompt);

// ----------------------------------------------------------------------------
// JSON Lines IO

void write_corpus_jsonl(const std::filesystem::path& path, const Corpus& corpus, const std::string& config_hash);
std::vector<Instance> read_corpus_jsonl(const std::filesystem::path& path);
void write_templates_json(const std::filesystem::path& path, const std::vector<Template>& templates,
                          const std::string& config_hash);
std::vector<Template> read_templates_json(const std::filesystem::path& path);
void write_controls_jsonl(const std::filesystem::path& path, const std::vector<ControlSuite>& suites,
                          const std::string& config_hash);
std::vector<ControlSuite> read_controls_jsonl(const std::filesystem::path& path);

}  // namespace cca
