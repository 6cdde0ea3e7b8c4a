#include "cca/trace_engine.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace cca {

using nlohmann::json;

bool answer_correct(const Trace& trace, std::int64_t gold) { return trace.finished && trace.answer == gold; }

Token greedy_token(std::span<const float> logits) {
    Token best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[static_cast<std::size_t>(best)]) {
            best = static_cast<Token>(i);
        }
    }
    return best;
}

Token sample_token(std::span<const float> logits, double temperature, Rng& rng) {
    if (!(temperature > 0.0)) {
        return greedy_token(logits);
    }
    const double top = logits[static_cast<std::size_t>(greedy_token(logits))];
    std::vector<double> w(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        w[i] = std::exp((logits[i] - top) / temperature);
        total += w[i];
    }
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (u < acc) {
            return static_cast<Token>(i);
        }
    }
    // rounding left u at the top of the range; take the last token with mass
    for (std::size_t i = w.size(); i-- > 0;) {
        if (w[i] > 0.0) {
            return static_cast<Token>(i);
        }
    }
    return greedy_token(logits);
}

Trace decode(const Decoder& decoder, const Tokenizer& tok, std::span<const Token> prompt, const DecodeSpec& spec) {
    const TokenSeq p(prompt.begin(), prompt.end());
    return decode_batch(decoder, tok, std::span<const TokenSeq>(&p, 1), std::span<const DecodeSpec>(&spec, 1)).front();
}

std::vector<Trace> decode_batch(const Decoder& decoder, const Tokenizer& tok, std::span<const TokenSeq> prompts,
                                std::span<const DecodeSpec> specs) {
    if (prompts.size() != specs.size()) {
        throw ShapeError("decode_batch needs one spec per prompt");
    }
    const std::size_t n = prompts.size();
    std::vector<Trace> traces(n);
    std::vector<DecodeState> states;
    std::vector<Rng> rngs;
    std::vector<int> caps(n);
    states.reserve(n);
    rngs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int cap = specs[i].max_length > 0 ? std::min(specs[i].max_length, decoder.max_seq_len())
                                                : decoder.max_seq_len();
        if (prompts[i].empty()) {
            throw InputError("cannot decode from an empty prompt");
        }
        if (static_cast<int>(prompts[i].size()) >= cap) {
            throw LengthError("prompt of " + std::to_string(prompts[i].size()) +
                              " tokens leaves no room to generate within " + std::to_string(cap));
        }
        caps[i] = cap;
        traces[i].tokens = prompts[i];
        traces[i].prompt_length = static_cast<int>(prompts[i].size());
        traces[i].spec = specs[i];
        states.push_back(decoder.start());
        rngs.emplace_back(specs[i].seed);
    }

    std::vector<DecodeState*> active;
    std::vector<std::size_t> active_idx;
    for (std::size_t i = 0; i < n; ++i) {
        active.push_back(&states[i]);
        active_idx.push_back(i);
    }
    decoder.extend(active, prompts);

    std::vector<TokenSeq> step_tokens;
    while (!active.empty()) {
        std::vector<DecodeState*> next;
        std::vector<std::size_t> next_idx;
        step_tokens.clear();
        for (std::size_t a = 0; a < active.size(); ++a) {
            const std::size_t i = active_idx[a];
            const auto logits = active[a]->last_logits();
            const Token t = specs[i].mode == DecodeMode::greedy ? greedy_token(logits)
                                                                : sample_token(logits, specs[i].temperature, rngs[i]);
            traces[i].tokens.push_back(t);
            if (t == Tokenizer::eos) {
                traces[i].finished = true;
            } else if (static_cast<int>(traces[i].tokens.size()) < caps[i]) {
                next.push_back(active[a]);
                next_idx.push_back(i);
                step_tokens.push_back(TokenSeq{t});
            }
        }
        if (!next.empty()) {
            decoder.extend(next, step_tokens);
        }
        active = std::move(next);
        active_idx = std::move(next_idx);
    }
    for (auto& tr : traces) {
        tr.answer = extract_answer(tok, tr.tokens);  // questions never hold the marker
    }
    return traces;
}

// ----------------------------------------------------------------------------

std::string_view to_string(Orientation o) {
    return o == Orientation::greedy_correct ? "greedy_correct" : "greedy_incorrect";
}

Orientation orientation_from_string(std::string_view s) {
    if (s == "greedy_correct") return Orientation::greedy_correct;
    if (s == "greedy_incorrect") return Orientation::greedy_incorrect;
    throw FormatError("unknown orientation '" + std::string(s) + "'");
}

std::uint64_t pair_seed(std::uint64_t master, int instance_id, int attempt) {
    return derive_seed(master, {static_cast<std::uint64_t>(instance_id), static_cast<std::uint64_t>(attempt)});
}

std::optional<TracePair> make_trace_pair(const Decoder& decoder, const Tokenizer& tok, const Instance& instance,
                                         const PairConfig& cfg) {
    return make_trace_pairs(decoder, tok, std::span<const Instance>(&instance, 1), cfg).front();
}

std::vector<std::optional<TracePair>> make_trace_pairs(const Decoder& decoder, const Tokenizer& tok,
                                                       std::span<const Instance> instances, const PairConfig& cfg) {
    const std::size_t n = instances.size();
    std::vector<TokenSeq> prompts;
    prompts.reserve(n);
    for (const auto& in : instances) {
        prompts.push_back(prompt_tokens(tok, in.question));
    }
    std::vector<DecodeSpec> specs(n, DecodeSpec{DecodeMode::greedy, 0.0, 0, cfg.max_length});
    const auto greedy = decode_batch(decoder, tok, prompts, specs);

    std::vector<std::optional<TracePair>> out(n);
    std::vector<std::size_t> pending(n);
    for (std::size_t i = 0; i < n; ++i) {
        pending[i] = i;
    }
    // round a samples attempt a for every instance still lacking a counterfactual
    for (int attempt = 1; attempt <= cfg.max_resamples && !pending.empty(); ++attempt) {
        std::vector<TokenSeq> p;
        std::vector<DecodeSpec> s;
        for (std::size_t i : pending) {
            p.push_back(prompts[i]);
            s.push_back(DecodeSpec{DecodeMode::sampled, cfg.temperature,
                                   pair_seed(cfg.seed, instances[i].instance_id, attempt), cfg.max_length});
        }
        const auto sampled = decode_batch(decoder, tok, p, s);
        std::vector<std::size_t> still;
        for (std::size_t k = 0; k < pending.size(); ++k) {
            const std::size_t i = pending[k];
            const bool greedy_ok = answer_correct(greedy[i], instances[i].answer);
            const bool sample_ok = answer_correct(sampled[k], instances[i].answer);
            if (greedy_ok == sample_ok) {
                still.push_back(i);
                continue;
            }
            TracePair pair;
            pair.instance_id = instances[i].instance_id;
            pair.gold_answer = instances[i].answer;
            pair.prompt_length = greedy[i].prompt_length;
            pair.attempt = attempt;
            pair.orientation = greedy_ok ? Orientation::greedy_correct : Orientation::greedy_incorrect;
            pair.correct = greedy_ok ? greedy[i].tokens : sampled[k].tokens;
            pair.incorrect = greedy_ok ? sampled[k].tokens : greedy[i].tokens;
            out[i] = std::move(pair);
        }
        pending = std::move(still);
    }
    return out;
}

void write_trace_pairs_jsonl(const std::filesystem::path& path, const std::vector<TracePair>& pairs,
                             const std::string& config_hash) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw FormatError("cannot write " + path.string());
    }
    // header line: the hash survives an empty pair set
    os << json{{"header", true}, {"config_hash", config_hash}}.dump() << '\n';
    for (const auto& p : pairs) {
        os << json{{"instance_id", p.instance_id},
                   {"orientation", to_string(p.orientation)},
                   {"correct_tokens", p.correct},
                   {"incorrect_tokens", p.incorrect},
                   {"gold_answer", p.gold_answer},
                   {"prompt_length", p.prompt_length},
                   {"attempt", p.attempt},
                   {"config_hash", config_hash}}
                  .dump()
           << '\n';
    }
}

std::vector<TracePair> read_trace_pairs_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot read " + path.string());
    }
    std::vector<TracePair> out;
    for (std::string line; std::getline(is, line);) {
        if (line.empty()) {
            continue;
        }
        try {
            const json j = json::parse(line);
            if (j.value("header", false)) continue;
            TracePair p;
            p.instance_id = j.at("instance_id");
            p.orientation = orientation_from_string(j.at("orientation").get<std::string>());
            p.correct = j.at("correct_tokens").get<TokenSeq>();
            p.incorrect = j.at("incorrect_tokens").get<TokenSeq>();
            p.gold_answer = j.at("gold_answer");
            p.prompt_length = j.at("prompt_length");
            p.attempt = j.value("attempt", 0);
            out.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace cca
