#include "cca/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace cca {

using nlohmann::json;

namespace {

const std::vector<std::string> kNames = {"tom", "ann", "bob", "eva", "sam", "mia",
                                         "leo", "zoe", "ben", "amy", "jim", "kim"};
const std::vector<std::string> kItems = {"apples", "pens",  "books", "cards",   "coins", "shells", "stamps",
                                         "cups",   "eggs",  "rocks", "marbles", "toys",  "hats",   "bikes",
                                         "plums",  "kites", "beads", "nuts",    "socks", "bells"};
const std::vector<std::string> kAddVerbs = {"buys", "finds", "gets", "wins", "picks"};
const std::vector<std::string> kSubVerbs = {"sells", "loses", "eats", "gives"};
const std::vector<std::string> kLetters = {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"};

bool all_digits(const std::string& w) {
    return !w.empty() && std::all_of(w.begin(), w.end(), [](char c) { return c >= '0' && c <= '9'; });
}

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> out;
    for (std::string w; is >> w;) {
        out.push_back(w);
    }
    return out;
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) {
            out += ' ';
        }
        out += w;
    }
    return out;
}

std::int64_t apply(Op op, std::int64_t acc, std::int64_t x) {
    switch (op) {
        case Op::add: return acc + x;
        case Op::sub: return acc - x;
        case Op::mul: return acc * x;
    }
    return acc;
}

std::string render(const std::string& pattern, const std::vector<int>& values) {
    std::string out;
    for (std::size_t i = 0; i < pattern.size(); ++i) {
        if (pattern[i] == '{') {
            const auto close = pattern.find('}', i);
            out += std::to_string(values.at(std::stoul(pattern.substr(i + 1, close - i - 1))));
            i = close;
        } else {
            out += pattern[i];
        }
    }
    return out;
}

Template make_template(int id, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x7e3, static_cast<std::uint64_t>(id)}));
    auto pick = [&](const std::vector<std::string>& v) { return v[rng.uniform_int(0, v.size() - 1)]; };

    Template t;
    t.template_id = id;
    t.subject = pick(kNames);
    t.item = pick(kItems);

    const int n_steps = static_cast<int>(rng.uniform_int(2, 5));
    // start quantity
    const int start_lo = static_cast<int>(rng.uniform_int(5, 30));
    t.slots.push_back({start_lo, start_lo + static_cast<int>(rng.uniform_int(10, 40))});
    t.start_slot = 0;
    t.sentences.push_back(t.subject + " has {0} " + t.item + " .");

    bool used_mul = false;
    for (int s = 0; s < n_steps; ++s) {
        const double u = rng.uniform();
        ProgramStep step;
        if (u < 0.15 && !used_mul && s > 0) {
            used_mul = true;
            step.op = Op::mul;
            step.constant = rng.uniform() < 0.5 ? 2 : 3;
            t.sentences.push_back(t.subject + (step.constant == 2 ? " doubles" : " triples") + " them .");
        } else {
            step.op = u < 0.6 ? Op::add : Op::sub;
            step.slot = static_cast<int>(t.slots.size());
            const int lo = static_cast<int>(rng.uniform_int(1, 5));
            t.slots.push_back({lo, lo + static_cast<int>(rng.uniform_int(5, 20))});
            const std::string verb = pick(step.op == Op::add ? kAddVerbs : kSubVerbs);
            t.sentences.push_back(t.subject + " " + verb + " {" + std::to_string(step.slot) + "} .");
        }
        t.program.push_back(step);
    }

    // distractors mention another name; they never enter the program
    const int n_distract = static_cast<int>(rng.uniform_int(0, 2));
    for (int d = 0; d < n_distract; ++d) {
        std::string other = pick(kNames);
        while (other == t.subject) {
            other = pick(kNames);
        }
        const int slot = static_cast<int>(t.slots.size());
        t.slots.push_back({1, static_cast<int>(rng.uniform_int(10, 50))});
        t.distractor_slots.push_back(slot);
        const std::string slot_ref = "{" + std::to_string(slot) + "}";
        std::string sentence = rng.uniform() < 0.5 ? other + " has " + slot_ref + " " + pick(kItems) + " ."
                                                   : other + " " + pick(kAddVerbs) + " " + slot_ref + " " + t.item + " .";
        const auto pos = rng.uniform_int(1, t.sentences.size());
        t.sentences.insert(t.sentences.begin() + pos, sentence);
    }
    return t;
}

std::string gold_trace(const Template& t, const std::vector<int>& values, std::int64_t& answer) {
    std::int64_t acc = values[t.start_slot];
    std::string out = t.item + " :";
    for (const auto& step : t.program) {
        const std::int64_t x = step.slot >= 0 ? values[step.slot] : step.constant;
        const std::int64_t next = apply(step.op, acc, x);
        out += " " + std::to_string(acc) + " " + static_cast<char>(step.op) + " " + std::to_string(x) + " = " +
               std::to_string(next) + " ;";
        acc = next;
    }
    out += " #### " + std::to_string(acc);
    answer = acc;
    return out;
}

/// True when every intermediate value stays in [0, kAnswerLimit).
bool program_in_range(const Template& t, const std::vector<int>& values) {
    std::int64_t acc = values[t.start_slot];
    for (const auto& step : t.program) {
        acc = apply(step.op, acc, step.slot >= 0 ? values[step.slot] : step.constant);
        if (acc < 0 || acc >= kAnswerLimit) {
            return false;
        }
    }
    return true;
}

std::vector<int> sample_values(const Template& t, Rng& rng) {
    for (int attempt = 0; attempt < 100000; ++attempt) {
        std::vector<int> values;
        values.reserve(t.slots.size());
        for (const auto& r : t.slots) {
            values.push_back(static_cast<int>(rng.uniform_int(r.lo, r.hi)));
        }
        if (program_in_range(t, values)) {
            return values;
        }
    }
    throw InputError("template " + std::to_string(t.template_id) + " admits no in-range slot values");
}

json template_to_json(const Template& t) {
    json slots = json::array();
    for (const auto& s : t.slots) {
        slots.push_back({s.lo, s.hi});
    }
    json program = json::array();
    for (const auto& p : t.program) {
        program.push_back({{"op", std::string(1, static_cast<char>(p.op))}, {"slot", p.slot}, {"constant", p.constant}});
    }
    return {{"template_id", t.template_id}, {"subject", t.subject},       {"item", t.item},
            {"sentences", t.sentences},     {"slots", slots},             {"start_slot", t.start_slot},
            {"program", program},           {"distractor_slots", t.distractor_slots}};
}

Template template_from_json(const json& j) {
    Template t;
    t.template_id = j.at("template_id");
    t.subject = j.at("subject");
    t.item = j.at("item");
    t.sentences = j.at("sentences").get<std::vector<std::string>>();
    for (const auto& s : j.at("slots")) {
        t.slots.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
    }
    t.start_slot = j.at("start_slot");
    for (const auto& p : j.at("program")) {
        ProgramStep step;
        step.op = static_cast<Op>(p.at("op").get<std::string>().at(0));
        step.slot = p.at("slot");
        step.constant = p.at("constant");
        t.program.push_back(step);
    }
    t.distractor_slots = j.at("distractor_slots").get<std::vector<int>>();
    return t;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw FormatError("cannot write " + path.string());
    }
    return os;
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot read " + path.string());
    }
    std::vector<json> out;
    std::size_t line_no = 0;
    for (std::string line; std::getline(is, line);) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace

// ----------------------------------------------------------------------------
// Tokenizer

Tokenizer::Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!ids_.emplace(words_[i], static_cast<Token>(i)).second) {
            throw InputError("duplicate vocabulary word '" + words_[i] + "'");
        }
    }
    if (words_.size() < 3 || words_[pad] != "<pad>" || words_[bos] != "<bos>" || words_[eos] != "<eos>") {
        throw InputError("vocabulary must start with <pad> <bos> <eos>");
    }
    digit0_ = id("0");
    for (int d = 1; d < 10; ++d) {
        if (id(std::to_string(d)) != digit0_ + d) {
            throw InputError("digit tokens must be contiguous");
        }
    }
    marker_ = id("####");
}

Tokenizer Tokenizer::standard() {
    std::vector<std::string> w = {"<pad>", "<bos>", "<eos>"};
    for (int d = 0; d < 10; ++d) {
        w.push_back(std::to_string(d));
    }
    for (const char* s : {"####", ".", "?", ":", ";", "+", "-", "*", "=", "->", "has", "how", "many", "does", "have",
                          "them", "doubles", "triples", "copy", "max", "recall"}) {
        w.emplace_back(s);
    }
    for (const auto* list : {&kNames, &kItems, &kAddVerbs, &kSubVerbs, &kLetters}) {
        w.insert(w.end(), list->begin(), list->end());
    }
    return Tokenizer(std::move(w));
}

Token Tokenizer::id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) {
        throw InputError("word '" + word + "' is not in the vocabulary");
    }
    return it->second;
}

const std::string& Tokenizer::word(Token t) const {
    if (t < 0 || t >= size()) {
        throw IndexError("token id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(size()));
    }
    return words_[static_cast<std::size_t>(t)];
}

TokenSeq Tokenizer::encode(const std::string& text) const {
    TokenSeq out;
    for (const auto& w : split_words(text)) {
        if (all_digits(w)) {
            for (char c : w) {
                out.push_back(digit0_ + (c - '0'));
            }
        } else {
            out.push_back(id(w));
        }
    }
    return out;
}

std::string Tokenizer::decode(std::span<const Token> tokens) const {
    std::string out;
    bool prev_digit = false;
    for (Token t : tokens) {
        const bool d = is_digit(t);
        if (!out.empty() && !(d && prev_digit)) {
            out += ' ';
        }
        out += word(t);
        prev_digit = d;
    }
    return out;
}

std::uint64_t Tokenizer::hash() const {
    Fnv1a h;
    for (const auto& w : words_) {
        h.update(w);
        h.update("\n", 1);
    }
    return h.digest();
}

// ----------------------------------------------------------------------------
// Templates and instances

std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::none: return "none";
    }
    return "none";
}

Split split_from_string(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "none") return Split::none;
    throw FormatError("unknown split '" + std::string(s) + "'");
}

std::vector<Template> generate_templates(int n_templates, std::uint64_t seed) {
    if (n_templates < 1) {
        throw InputError("n_templates must be at least 1");
    }
    std::vector<Template> out;
    std::set<std::string> seen;
    for (int id = 0; static_cast<int>(out.size()) < n_templates; ++id) {
        Template t = make_template(id, seed);
        // texts must be distinct so no two templates share a question surface
        if (!seen.insert(join(t.sentences)).second) {
            continue;
        }
        t.template_id = static_cast<int>(out.size());
        out.push_back(std::move(t));
    }
    return out;
}

std::int64_t run_program(const Template& t, const std::vector<int>& values) {
    std::int64_t acc = values.at(t.start_slot);
    for (const auto& step : t.program) {
        acc = apply(step.op, acc, step.slot >= 0 ? values.at(step.slot) : step.constant);
    }
    return acc;
}

Instance sample_instance(const Template& t, int instance_id, Rng& rng) {
    Instance in;
    in.template_id = t.template_id;
    in.instance_id = instance_id;
    in.values = sample_values(t, rng);
    std::vector<std::string> sentences;
    for (const auto& s : t.sentences) {
        sentences.push_back(render(s, in.values));
    }
    sentences.push_back("how many " + t.item + " does " + t.subject + " have ?");
    in.question = join(sentences);
    in.gold_trace = gold_trace(t, in.values, in.answer);
    return in;
}

Corpus generate_corpus(int n_templates, int instances_per_template, std::uint64_t seed) {
    if (instances_per_template < 1) {
        throw InputError("instances_per_template must be at least 1");
    }
    Corpus c;
    c.templates = generate_templates(n_templates, seed);
    for (const auto& t : c.templates) {
        Rng rng(derive_seed(seed, {0x1a5, static_cast<std::uint64_t>(t.template_id)}));
        std::set<std::vector<int>> seen;
        int attempts = 0;
        while (static_cast<int>(seen.size()) < instances_per_template) {
            const int id = t.template_id * instances_per_template + static_cast<int>(seen.size());
            Instance in = sample_instance(t, id, rng);
            // duplicate slot values would leak test questions into train
            if (seen.insert(in.values).second) {
                c.instances.push_back(std::move(in));
            } else if (++attempts > 100000) {
                throw InputError("template " + std::to_string(t.template_id) + " has too few distinct instances");
            }
        }
    }
    return c;
}

SplitSizes split_sizes(int n) {
    SplitSizes s;
    s.train = (52 * n + 50) / 100;  // round half up
    s.val = (8 * n) / 100;          // floor
    s.test = n - s.train - s.val;
    return s;
}

void split(Corpus& corpus, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_template;
    for (std::size_t i = 0; i < corpus.instances.size(); ++i) {
        by_template[corpus.instances[i].template_id].push_back(i);
    }
    for (auto& [tid, idx] : by_template) {
        Rng rng(derive_seed(seed, {0x5b1, static_cast<std::uint64_t>(tid)}));
        rng.shuffle(idx);
        const SplitSizes s = split_sizes(static_cast<int>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const int ki = static_cast<int>(k);
            corpus.instances[idx[k]].split = ki < s.train ? Split::train : ki < s.train + s.val ? Split::val : Split::test;
        }
    }
}

std::vector<int> filter_templates(const Corpus& corpus, const std::map<int, bool>& correct, Split on,
                                  double threshold) {
    std::map<int, std::pair<int, int>> tally;  // template -> (correct, total)
    for (const auto& in : corpus.instances) {
        if (in.split != on) {
            continue;
        }
        auto it = correct.find(in.instance_id);
        if (it == correct.end()) {
            throw InputError("no correctness flag for instance " + std::to_string(in.instance_id));
        }
        auto& [c, n] = tally[in.template_id];
        c += it->second ? 1 : 0;
        ++n;
    }
    std::vector<int> kept;
    for (const auto& [tid, cn] : tally) {
        if (static_cast<double>(cn.first) / cn.second < threshold) {
            kept.push_back(tid);
        }
    }
    return kept;
}

TokenSeq prompt_tokens(const Tokenizer& tok, const std::string& question) {
    TokenSeq out{Tokenizer::bos};
    const TokenSeq q = tok.encode(question);
    out.insert(out.end(), q.begin(), q.end());
    return out;
}

TokenSeq continuation_tokens(const Tokenizer& tok, const std::string& trace) {
    TokenSeq out = tok.encode(trace);
    out.push_back(Tokenizer::eos);
    return out;
}

namespace {

LmSequence lm_sequence(TokenSeq prompt, const TokenSeq& continuation) {
    LmSequence s;
    const int first = static_cast<int>(prompt.size()) - 1;
    for (std::size_t j = 0; j < continuation.size(); ++j) {
        s.targets.emplace_back(first + static_cast<int>(j), continuation[j]);
    }
    s.tokens = std::move(prompt);
    // the final target is predicted, never consumed
    s.tokens.insert(s.tokens.end(), continuation.begin(), continuation.end() - 1);
    return s;
}

}  // namespace

LmSequence math_sequence(const Tokenizer& tok, const Instance& inst) {
    return lm_sequence(prompt_tokens(tok, inst.question), continuation_tokens(tok, inst.gold_trace));
}

LmSequence control_sequence(const Tokenizer& tok, const ControlExample& ex) {
    return lm_sequence(prompt_tokens(tok, ex.prompt), continuation_tokens(tok, ex.target));
}

std::optional<std::int64_t> extract_answer(const Tokenizer& tok, std::span<const Token> tokens) {
    const auto marker = std::find(tokens.rbegin(), tokens.rend(), tok.answer_marker());
    if (marker == tokens.rend()) {
        return std::nullopt;
    }
    std::int64_t value = 0;
    int digits = 0;
    for (auto it = marker.base(); it != tokens.end() && tok.is_digit(*it); ++it) {
        if (++digits > 18) {
            return std::nullopt;
        }
        value = value * 10 + tok.digit_value(*it);
    }
    if (digits == 0) {
        return std::nullopt;
    }
    return value;
}

std::optional<std::int64_t> extract_answer(const std::string& text) {
    const auto words = split_words(text);
    const auto marker = std::find(words.rbegin(), words.rend(), "####");
    if (marker == words.rend() || marker.base() == words.end()) {
        return std::nullopt;
    }
    const std::string& w = *marker.base();
    if (!all_digits(w) || w.size() > 18) {
        return std::nullopt;
    }
    return std::stoll(w);
}

// ----------------------------------------------------------------------------
// Control suites

std::string_view to_string(ControlTask t) {
    switch (t) {
        case ControlTask::copy: return "copy";
        case ControlTask::max: return "max";
        case ControlTask::recall: return "recall";
    }
    return "copy";
}

ControlExample sample_control(ControlTask task, Rng& rng) {
    ControlExample ex;
    ex.task = task;
    std::vector<std::string> words{std::string(to_string(task)), ":"};
    switch (task) {
        case ControlTask::copy: {
            const auto n = rng.uniform_int(3, 5);
            std::vector<std::string> seq;
            for (int i = 0; i < n; ++i) {
                seq.push_back(kLetters[rng.uniform_int(0, kLetters.size() - 1)]);
            }
            words.insert(words.end(), seq.begin(), seq.end());
            ex.target = join(seq);
            break;
        }
        case ControlTask::max: {
            const auto n = rng.uniform_int(3, 6);
            std::int64_t best = -1;
            for (int i = 0; i < n; ++i) {
                const auto d = rng.uniform_int(0, 9);
                best = std::max(best, d);
                words.push_back(std::to_string(d));
            }
            ex.target = std::to_string(best);
            break;
        }
        case ControlTask::recall: {
            std::vector<std::string> keys = kLetters;
            rng.shuffle(keys);
            const auto n = rng.uniform_int(3, 5);
            for (int i = 0; i < n; ++i) {
                words.push_back(keys[i]);
                words.push_back(std::to_string(rng.uniform_int(0, 9)));
            }
            const auto q = rng.uniform_int(0, n - 1);
            words.push_back("?");
            words.push_back(keys[q]);
            ex.target = words[2 + 2 * q + 1];
            break;
        }
    }
    words.push_back("->");
    ex.prompt = join(words);
    return ex;
}

std::vector<ControlSuite> generate_control_suites(std::uint64_t seed, int train_per_task, int eval_per_task) {
    std::vector<ControlSuite> out;
    for (ControlTask task : {ControlTask::copy, ControlTask::max, ControlTask::recall}) {
        ControlSuite suite;
        suite.task = task;
        Rng rng(derive_seed(seed, {0xc7, static_cast<std::uint64_t>(task)}));
        std::set<std::string> eval_prompts;
        // the held-out portion is drawn first; training draws skip its prompts
        while (static_cast<int>(suite.eval.size()) < eval_per_task) {
            ControlExample ex = sample_control(task, rng);
            if (eval_prompts.insert(ex.prompt).second) {
                suite.eval.push_back(std::move(ex));
            }
        }
        while (static_cast<int>(suite.train.size()) < train_per_task) {
            ControlExample ex = sample_control(task, rng);
            if (!eval_prompts.count(ex.prompt)) {
                suite.train.push_back(std::move(ex));
            }
        }
        out.push_back(std::move(suite));
    }
    return out;
}

std::string recall_lookup(const std::string& prompt) {
    const auto w = split_words(prompt);
    const auto q = std::find(w.begin(), w.end(), "?");
    if (w.size() < 4 || w[0] != "recall" || q == w.end() || q + 1 == w.end()) {
        throw InputError("not a recall prompt: " + prompt);
    }
    const std::string& key = *(q + 1);
    for (auto it = w.begin() + 2; it + 1 < q; it += 2) {
        if (*it == key) {
            return *(it + 1);
        }
    }
    throw InputError("recall key '" + key + "' is unbound in: " + prompt);
}

// ----------------------------------------------------------------------------
// IO

void write_corpus_jsonl(const std::filesystem::path& path, const Corpus& corpus, const std::string& config_hash) {
    auto os = open_out(path);
    for (const auto& in : corpus.instances) {
        json j = {{"template_id", in.template_id}, {"instance_id", in.instance_id}, {"question", in.question},
                  {"gold_trace", in.gold_trace},   {"answer", in.answer},           {"split", to_string(in.split)},
                  {"values", in.values},           {"config_hash", config_hash}};
        os << j.dump() << '\n';
    }
}

std::vector<Instance> read_corpus_jsonl(const std::filesystem::path& path) {
    std::vector<Instance> out;
    for (const auto& j : read_jsonl(path)) {
        Instance in;
        try {
            in.template_id = j.at("template_id");
            in.instance_id = j.at("instance_id");
            in.question = j.at("question");
            in.gold_trace = j.at("gold_trace");
            in.answer = j.at("answer");
            in.split = split_from_string(j.at("split").get<std::string>());
            if (j.contains("values")) {
                in.values = j.at("values").get<std::vector<int>>();
            }
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
        out.push_back(std::move(in));
    }
    return out;
}

void write_templates_json(const std::filesystem::path& path, const std::vector<Template>& templates,
                          const std::string& config_hash) {
    json arr = json::array();
    for (const auto& t : templates) {
        arr.push_back(template_to_json(t));
    }
    auto os = open_out(path);
    os << json{{"config_hash", config_hash}, {"templates", arr}}.dump(1) << '\n';
}

std::vector<Template> read_templates_json(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot read " + path.string());
    }
    try {
        const json j = json::parse(is);
        std::vector<Template> out;
        for (const auto& t : j.at("templates")) {
            out.push_back(template_from_json(t));
        }
        return out;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_controls_jsonl(const std::filesystem::path& path, const std::vector<ControlSuite>& suites,
                          const std::string& config_hash) {
    auto os = open_out(path);
    for (const auto& s : suites) {
        for (const auto* part : {&s.train, &s.eval}) {
            for (const auto& ex : *part) {
                os << json{{"task", to_string(ex.task)},
                           {"portion", part == &s.train ? "train" : "eval"},
                           {"prompt", ex.prompt},
                           {"target", ex.target},
                           {"config_hash", config_hash}}
                          .dump()
                   << '\n';
            }
        }
    }
}

std::vector<ControlSuite> read_controls_jsonl(const std::filesystem::path& path) {
    std::vector<ControlSuite> suites;
    for (ControlTask task : {ControlTask::copy, ControlTask::max, ControlTask::recall}) {
        suites.push_back(ControlSuite{task, {}, {}});
    }
    for (const auto& j : read_jsonl(path)) {
        const std::string task = j.at("task");
        ControlExample ex;
        ex.task = task == "copy" ? ControlTask::copy : task == "max" ? ControlTask::max : ControlTask::recall;
        if (task != "copy" && task != "max" && task != "recall") {
            throw FormatError(path.string() + ": unknown control task '" + task + "'");
        }
        ex.prompt = j.at("prompt");
        ex.target = j.at("target");
        auto& suite = suites[static_cast<std::size_t>(ex.task)];
        (j.at("portion") == "train" ? suite.train : suite.eval).push_back(std::move(ex));
    }
    return suites;
}

}  // namespace cca
