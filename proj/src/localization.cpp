#include "cca/localization.hpp"

#include <fstream>

#include <json.hpp>

namespace cca {

using nlohmann::json;

std::string_view to_string(LocalizationMethod m) { return m == LocalizationMethod::prefix ? "prefix" : "branching"; }

LocalizationMethod method_from_string(std::string_view s) {
    if (s == "prefix") return LocalizationMethod::prefix;
    if (s == "branching") return LocalizationMethod::branching;
    throw InputError("unknown localization method '" + std::string(s) + "'");
}

std::string_view to_string(PivotFailure f) {
    switch (f) {
        case PivotFailure::no_divergence: return "no_divergence";
        case PivotFailure::no_intervention_token: return "no_intervention_token";
        case PivotFailure::no_pivot: return "no_pivot";
        case PivotFailure::same_token: return "same_token";
    }
    return "no_pivot";
}

namespace {

std::span<const Token> generated(const TokenSeq& trace, int prompt_length) {
    return std::span<const Token>(trace).subspan(static_cast<std::size_t>(prompt_length));
}

const TokenSeq& sampled_side(const TracePair& p) {
    return p.orientation == Orientation::greedy_correct ? p.incorrect : p.correct;
}

void check_pair(const TracePair& p) {
    if (p.prompt_length < 1 || static_cast<int>(p.correct.size()) < p.prompt_length ||
        static_cast<int>(p.incorrect.size()) < p.prompt_length ||
        !std::equal(p.correct.begin(), p.correct.begin() + p.prompt_length, p.incorrect.begin())) {
        throw InputError("trace pair " + std::to_string(p.instance_id) + " does not share its prompt");
    }
}

/// Class of a complete trace (one that cannot be extended further).
bool terminal_correct(const Tokenizer& tok, const TokenSeq& tokens, std::int64_t gold) {
    Trace t;
    t.tokens = tokens;
    t.finished = !tokens.empty() && tokens.back() == Tokenizer::eos;
    t.answer = extract_answer(tok, tokens);
    return answer_correct(t, gold);
}

int decode_cap(const Decoder& decoder, int max_length) {
    return max_length > 0 ? std::min(max_length, decoder.max_seq_len()) : decoder.max_seq_len();
}

}  // namespace

int first_divergence(const TracePair& pair) {
    check_pair(pair);
    const auto a = generated(pair.correct, pair.prompt_length);
    const auto b = generated(pair.incorrect, pair.prompt_length);
    const std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (a[i] != b[i]) {
            return static_cast<int>(i);
        }
    }
    throw LocalizationError(PivotFailure::no_divergence, "traces of instance " + std::to_string(pair.instance_id) +
                                                             " do not diverge before one ends");
}

PivotResult prefix_pivot(const TracePair& pair) {
    const int k = first_divergence(pair);
    if (k == 0) {
        throw LocalizationError(PivotFailure::no_intervention_token,
                                "traces of instance " + std::to_string(pair.instance_id) +
                                    " differ at the first generated token");
    }
    PivotResult r;
    r.method = LocalizationMethod::prefix;
    r.pivotal = k;
    r.intervention = k - 1;
    r.divergence = k;
    r.prefix.assign(pair.correct.begin(), pair.correct.begin() + pair.prompt_length + k);
    r.desired = pair.correct[static_cast<std::size_t>(pair.prompt_length + k)];
    r.undesired = pair.incorrect[static_cast<std::size_t>(pair.prompt_length + k)];
    return r;
}

bool completes_correctly(const Decoder& decoder, const Tokenizer& tok, std::span<const Token> prefix,
                         std::int64_t gold, int max_length) {
    const TokenSeq p(prefix.begin(), prefix.end());
    if (p.back() == Tokenizer::eos || static_cast<int>(p.size()) >= decode_cap(decoder, max_length)) {
        return terminal_correct(tok, p, gold);
    }
    return answer_correct(decode(decoder, tok, p, DecodeSpec{DecodeMode::greedy, 0.0, 0, max_length}), gold);
}

std::vector<PivotOutcome> branching_pivots(std::span<const TracePair> pairs, const Decoder& decoder,
                                           const Tokenizer& tok, const BranchingConfig& cfg) {
    struct Job {
        std::size_t idx;
        const TokenSeq* y;
        int base;            // prompt length
        int cursor;          // next generated index to examine
        bool greedy_class;   // f on prefixes shared with the greedy trace
        std::vector<Token> argmax;  // argmax[j]: greedy choice after y_<j
        int redecodes = 0;
        int divergence = 0;
    };
    std::vector<PivotOutcome> out(pairs.size());
    std::vector<Job> jobs;
    const int cap = decode_cap(decoder, cfg.max_length);

    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const TracePair& pair = pairs[i];
        int d = 0;
        try {
            d = first_divergence(pair);
        } catch (const LocalizationError& e) {
            out[i].failure = e.reason();
            continue;
        }
        Job job{i, &sampled_side(pair), pair.prompt_length, d,
                pair.orientation == Orientation::greedy_correct, {}, 0, d};
        // one forward pass gives the greedy choice after every prefix of y
        const Logits logits = forward(decoder.params(), *job.y);
        const int n = static_cast<int>(job.y->size()) - job.base;
        job.argmax.resize(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
            job.argmax[static_cast<std::size_t>(j)] = greedy_token(logits.row_span(job.base + j - 1));
        }
        jobs.push_back(std::move(job));
    }

    // Where y_j equals the greedy choice, f(y_<j) = f(y_<=j); only sampled
    // deviations can flip the class, so each round re-decodes one per job.
    std::vector<Job*> active;
    for (auto& j : jobs) active.push_back(&j);
    while (!active.empty()) {
        std::vector<Job*> pending;
        std::vector<TokenSeq> prompts;
        std::vector<Job*> decoded;
        std::vector<std::pair<Job*, bool>> resolved;  // (job, class of y_<=cursor)
        for (Job* job : active) {
            const int n = static_cast<int>(job->argmax.size());
            while (job->cursor < n && (*job->y)[static_cast<std::size_t>(job->base + job->cursor)] ==
                                          job->argmax[static_cast<std::size_t>(job->cursor)]) {
                ++job->cursor;
            }
            if (job->cursor >= n) {
                out[job->idx].failure = PivotFailure::no_pivot;
                continue;
            }
            TokenSeq prefix(job->y->begin(), job->y->begin() + job->base + job->cursor + 1);
            if (prefix.back() == Tokenizer::eos || static_cast<int>(prefix.size()) >= cap) {
                resolved.emplace_back(job, terminal_correct(tok, prefix, pairs[job->idx].gold_answer));
            } else {
                prompts.push_back(std::move(prefix));
                decoded.push_back(job);
            }
        }
        if (!prompts.empty()) {
            std::vector<DecodeSpec> specs(prompts.size(), DecodeSpec{DecodeMode::greedy, 0.0, 0, cfg.max_length});
            const auto traces = decode_batch(decoder, tok, prompts, specs);
            for (std::size_t k = 0; k < decoded.size(); ++k) {
                ++decoded[k]->redecodes;
                resolved.emplace_back(decoded[k], answer_correct(traces[k], pairs[decoded[k]->idx].gold_answer));
            }
        }
        for (auto [job, cls] : resolved) {
            if (cls == job->greedy_class) {
                ++job->cursor;
                pending.push_back(job);
                continue;
            }
            const TracePair& pair = pairs[job->idx];
            const int k = job->cursor;
            if (k == 0) {
                out[job->idx].failure = PivotFailure::no_intervention_token;
                continue;
            }
            PivotResult r;
            r.method = LocalizationMethod::branching;
            r.pivotal = k;
            r.intervention = k - 1;
            r.divergence = job->divergence;
            r.redecodes = job->redecodes;
            r.prefix.assign(job->y->begin(), job->y->begin() + job->base + k);
            const Token taken = (*job->y)[static_cast<std::size_t>(job->base + k)];
            const Token greedy = job->argmax[static_cast<std::size_t>(k)];
            // y is the sampled side: it holds the correct trace when greedy was wrong
            const bool y_correct = pair.orientation == Orientation::greedy_incorrect;
            r.desired = y_correct ? taken : greedy;
            r.undesired = y_correct ? greedy : taken;
            out[job->idx].pivot = std::move(r);
        }
        active = std::move(pending);
    }
    return out;
}

PivotResult branching_pivot(const TracePair& pair, const Decoder& decoder, const Tokenizer& tok,
                            const BranchingConfig& cfg) {
    auto outcome = branching_pivots(std::span<const TracePair>(&pair, 1), decoder, tok, cfg).front();
    if (outcome.failure) {
        throw LocalizationError(*outcome.failure, "no branching pivot for instance " +
                                                      std::to_string(pair.instance_id) + ": " +
                                                      std::string(to_string(*outcome.failure)));
    }
    return *outcome.pivot;
}

ErrorLocalizationDataset build_dataset(std::span<const TracePair> pairs, LocalizationMethod method,
                                       const Decoder& decoder, const Tokenizer& tok, const BranchingConfig& cfg) {
    ErrorLocalizationDataset ds;
    ds.report.pairs = static_cast<int>(pairs.size());
    std::vector<PivotOutcome> outcomes;
    if (method == LocalizationMethod::branching) {
        outcomes = branching_pivots(pairs, decoder, tok, cfg);
    } else {
        for (const auto& p : pairs) {
            PivotOutcome o;
            try {
                o.pivot = prefix_pivot(p);
            } catch (const LocalizationError& e) {
                o.failure = e.reason();
            }
            outcomes.push_back(std::move(o));
        }
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        auto& o = outcomes[i];
        if (o.pivot && o.pivot->desired == o.pivot->undesired) {
            o.failure = PivotFailure::same_token;
        }
        if (o.failure) {
            ++ds.report.skipped[*o.failure];
            continue;
        }
        ds.records.push_back(ErrorLocalizationRecord{pairs[i].instance_id, method, std::move(o.pivot->prefix),
                                                     o.pivot->desired, o.pivot->undesired, o.pivot->pivotal});
    }
    ds.report.records = static_cast<int>(ds.records.size());
    return ds;
}

void write_records_jsonl(const std::filesystem::path& path, const std::vector<ErrorLocalizationRecord>& records,
                         const std::string& config_hash) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw FormatError("cannot write " + path.string());
    }
    // header line: the hash survives an empty record set
    os << json{{"header", true}, {"config_hash", config_hash}}.dump() << '\n';
    for (const auto& r : records) {
        os << json{{"instance_id", r.instance_id},
                   {"method", to_string(r.method)},
                   {"prefix_token_ids", r.prefix},
                   {"desired_token_id", r.desired},
                   {"undesired_token_id", r.undesired},
                   {"pivotal_index", r.pivotal},
                   {"config_hash", config_hash}}
                  .dump()
           << '\n';
    }
}

std::vector<ErrorLocalizationRecord> read_records_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot read " + path.string());
    }
    std::vector<ErrorLocalizationRecord> out;
    for (std::string line; std::getline(is, line);) {
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            if (j.value("header", false)) continue;
            ErrorLocalizationRecord r;
            r.instance_id = j.at("instance_id");
            r.method = method_from_string(j.at("method").get<std::string>());
            r.prefix = j.at("prefix_token_ids").get<TokenSeq>();
            r.desired = j.at("desired_token_id");
            r.undesired = j.at("undesired_token_id");
            r.pivotal = j.value("pivotal_index", 0);
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace cca
