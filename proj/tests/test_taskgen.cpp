#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>
#include <sstream>

#include "cca/taskgen.hpp"
#include "fixtures.hpp"

using namespace cca;

namespace {

std::vector<std::string> words_of(const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> w;
    for (std::string x; is >> x;) {
        w.push_back(x);
    }
    return w;
}

// Reads the question as a story: only the asked-about subject's sentences
// change the count. Shares no code with the generator.
std::int64_t interpret_question(const std::string& question) {
    const auto w = words_of(question);
    // "... how many <item> does <subject> have ?"
    const std::string subject = w[w.size() - 3];
    const std::string item = w[w.size() - 5];
    static const std::set<std::string> add = {"buys", "finds", "gets", "wins", "picks"};
    static const std::set<std::string> sub = {"sells", "loses", "eats", "gives"};
    std::int64_t acc = -1;
    std::vector<std::string> sentence;
    for (const auto& x : w) {
        if (x != ".") {
            sentence.push_back(x);
            continue;
        }
        if (sentence[0] == subject) {
            const std::string& verb = sentence[1];
            if (verb == "has") {
                REQUIRE(sentence[3] == item);
                acc = std::stoll(sentence[2]);
            } else if (verb == "doubles") {
                acc *= 2;
            } else if (verb == "triples") {
                acc *= 3;
            } else if (add.count(verb)) {
                acc += std::stoll(sentence[2]);
            } else if (sub.count(verb)) {
                acc -= std::stoll(sentence[2]);
            } else {
                FAIL("unknown verb " << verb);
            }
        }
        sentence.clear();
    }
    return acc;
}

// Checks every "a op b = c ;" step of a trace and returns the final value.
std::int64_t check_trace_chain(const std::string& trace) {
    const auto w = words_of(trace);
    REQUIRE(w.size() >= 4);
    REQUIRE(w[1] == ":");
    std::int64_t prev = -1;
    std::size_t i = 2;
    for (; i + 5 < w.size() && w[i] != "####"; i += 6) {
        const std::int64_t a = std::stoll(w[i]);
        const std::int64_t b = std::stoll(w[i + 2]);
        const std::int64_t c = std::stoll(w[i + 4]);
        REQUIRE(w[i + 3] == "=");
        REQUIRE(w[i + 5] == ";");
        if (prev >= 0) {
            CHECK(a == prev);
        }
        const std::string& op = w[i + 1];
        CHECK(c == (op == "+" ? a + b : op == "-" ? a - b : a * b));
        prev = c;
    }
    REQUIRE(w[i] == "####");
    CHECK(std::stoll(w[i + 1]) == prev);
    return prev;
}

}  // namespace

TEST_CASE("tokenizer round-trips words and splits digits") {
    const Tokenizer tok = Tokenizer::standard();
    const TokenSeq t = tok.encode("tom has 120 apples .");
    CHECK(t.size() == 7);
    CHECK(tok.is_digit(t[2]));
    CHECK(tok.digit_value(t[3]) == 2);
    CHECK(tok.decode(t) == "tom has 120 apples .");
    CHECK_THROWS_AS(tok.encode("tom has a dragon"), InputError);
    CHECK_THROWS_AS(tok.word(tok.size()), IndexError);
}

TEST_CASE("corpus generation is deterministic and sized") {
    const Corpus a = generate_corpus(100, 50, 11);
    const Corpus b = generate_corpus(100, 50, 11);
    CHECK(a.templates.size() == 100);
    REQUIRE(a.instances.size() == 5000);
    bool same = true;
    for (std::size_t i = 0; i < a.instances.size(); ++i) {
        same = same && a.instances[i].question == b.instances[i].question &&
               a.instances[i].gold_trace == b.instances[i].gold_trace;
    }
    CHECK(same);
    const Corpus c = generate_corpus(100, 50, 12);
    CHECK(c.instances[0].question != a.instances[0].question);
}

TEST_CASE("gold traces agree with an independent interpreter") {
    const Tokenizer tok = Tokenizer::standard();
    const Corpus c = generate_corpus(100, 50, 3);
    std::set<int> ids;
    std::set<int> step_counts;
    for (const auto& t : c.templates) {
        step_counts.insert(static_cast<int>(t.program.size()));
    }
    CHECK(step_counts == std::set<int>{2, 3, 4, 5});
    for (const auto& in : c.instances) {
        CHECK(ids.insert(in.instance_id).second);
        CHECK(in.answer >= 0);
        CHECK(in.answer < kAnswerLimit);
        CHECK(interpret_question(in.question) == in.answer);
        CHECK(check_trace_chain(in.gold_trace) == in.answer);
        CHECK(run_program(c.templates[in.template_id], in.values) == in.answer);
        CHECK(extract_answer(in.gold_trace) == in.answer);
        CHECK(extract_answer(tok, continuation_tokens(tok, in.gold_trace)) == in.answer);
        // every word is in the vocabulary
        CHECK_NOTHROW(prompt_tokens(tok, in.question));
    }
}

TEST_CASE("instances of a template differ only in slot values") {
    const Corpus c = generate_corpus(5, 20, 9);
    for (const auto& in : c.instances) {
        const auto& first = c.instances[static_cast<std::size_t>(in.template_id) * 20];
        const auto a = words_of(in.question);
        const auto b = words_of(first.question);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            const bool numeric = std::isdigit(static_cast<unsigned char>(a[i][0])) != 0;
            if (!numeric) {
                CHECK(a[i] == b[i]);
            }
        }
    }
}

TEST_CASE("split sizes follow the rounding rule") {
    auto s = split_sizes(50);
    CHECK((s.train == 26 && s.val == 4 && s.test == 20));
    s = split_sizes(25);
    CHECK((s.train == 13 && s.val == 2 && s.test == 10));
    for (int n = 1; n <= 200; ++n) {
        s = split_sizes(n);
        CHECK(s.train + s.val + s.test == n);
        CHECK(s.test >= 0);
    }
}

TEST_CASE("split partitions each template exhaustively") {
    Corpus c = generate_corpus(100, 50, 5);
    split(c, 5);
    std::map<int, std::array<int, 3>> counts;
    for (const auto& in : c.instances) {
        REQUIRE(in.split != Split::none);
        ++counts[in.template_id][static_cast<int>(in.split)];
    }
    for (const auto& [tid, n] : counts) {
        CHECK(n[0] == 26);
        CHECK(n[1] == 4);
        CHECK(n[2] == 20);
    }
    Corpus d = generate_corpus(100, 50, 5);
    split(d, 5);
    for (std::size_t i = 0; i < c.instances.size(); ++i) {
        CHECK(c.instances[i].split == d.instances[i].split);
    }
}

TEST_CASE("template filter keeps templates below the threshold") {
    Corpus c = generate_corpus(3, 50, 1);
    split(c, 1);
    std::map<int, bool> correct;
    std::map<int, int> seen;
    for (const auto& in : c.instances) {
        bool ok = false;
        if (in.split == Split::train) {
            const int k = seen[in.template_id]++;
            // template 0 solved 26/26, template 1 solved 20/26, template 2 solved 0/26
            ok = in.template_id == 0 || (in.template_id == 1 && k < 20);
        }
        correct[in.instance_id] = ok;
    }
    CHECK(filter_templates(c, correct, Split::train, 0.8) == std::vector<int>{1, 2});
}

TEST_CASE("answer extraction uses the final marker") {
    CHECK(extract_answer("x : 1 + 2 = 3 ; #### 42") == 42);
    CHECK_FALSE(extract_answer("x : 1 + 2 = 3 ;").has_value());
    CHECK(extract_answer("#### 7 ; 3 #### 9") == 9);
    CHECK_FALSE(extract_answer("#### 7 ####").has_value());
    const Tokenizer tok = Tokenizer::standard();
    CHECK(extract_answer(tok, tok.encode("#### 7 ; #### 1 9 <eos>")) == 19);
    CHECK_FALSE(extract_answer(tok, tok.encode("apples : 1 2")).has_value());
}

TEST_CASE("control suites are well formed and disjoint from math") {
    const auto suites = generate_control_suites(4, 500, 100);
    REQUIRE(suites.size() == 3);
    const Tokenizer tok = Tokenizer::standard();
    const Corpus c = generate_corpus(100, 10, 4);
    for (const auto& s : suites) {
        CHECK(s.train.size() == 500);
        CHECK(s.eval.size() == 100);
        std::set<std::string> eval;
        for (const auto& ex : s.eval) {
            eval.insert(ex.prompt);
        }
        for (const auto& ex : s.train) {
            CHECK(eval.count(ex.prompt) == 0);
        }
        for (const auto* part : {&s.train, &s.eval}) {
            for (const auto& ex : *part) {
                CHECK_NOTHROW(tok.encode(ex.prompt + " " + ex.target));
                const auto w = words_of(ex.prompt);
                CHECK(w.back() == "->");
                if (s.task == ControlTask::copy) {
                    CHECK(ex.target == ex.prompt.substr(7, ex.prompt.size() - 10));
                } else if (s.task == ControlTask::max) {
                    std::string best = "0";
                    for (std::size_t i = 2; i + 1 < w.size(); ++i) {
                        best = std::max(best, w[i]);
                    }
                    CHECK(ex.target == best);
                } else {
                    CHECK(ex.target == recall_lookup(ex.prompt));
                }
            }
        }
    }
    // no control string occurs inside a math question or trace
    for (const auto& in : c.instances) {
        for (const auto& s : suites) {
            CHECK(in.question.find(std::string(to_string(s.task)) + " :") == std::string::npos);
            CHECK(in.gold_trace.find("->") == std::string::npos);
        }
    }
}

TEST_CASE("recall lookup oracle agrees with exhaustive search") {
    Rng rng(17);
    for (int i = 0; i < 300; ++i) {
        const ControlExample ex = sample_control(ControlTask::recall, rng);
        const auto w = words_of(ex.prompt);
        const std::string key = w[w.size() - 2];
        int hits = 0;
        std::string value;
        for (std::size_t k = 2; k + 3 < w.size(); k += 2) {
            if (w[k] == key) {
                ++hits;
                value = w[k + 1];
            }
        }
        CHECK(hits == 1);
        CHECK(value == ex.target);
    }
    CHECK_THROWS_AS(recall_lookup("copy : a b ->"), InputError);
}

TEST_CASE("corpus, templates and controls round-trip through files") {
    const auto dir = cca::testing::scratch_dir("taskgen_io");
    Corpus c = generate_corpus(4, 25, 8);
    split(c, 8);
    write_corpus_jsonl(dir / "corpus.jsonl", c, "abc");
    write_templates_json(dir / "templates.json", c.templates, "abc");
    const auto back = read_corpus_jsonl(dir / "corpus.jsonl");
    REQUIRE(back.size() == c.instances.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].question == c.instances[i].question);
        CHECK(back[i].answer == c.instances[i].answer);
        CHECK(back[i].split == c.instances[i].split);
    }
    const auto templates = read_templates_json(dir / "templates.json");
    REQUIRE(templates.size() == 4);
    for (const auto& in : c.instances) {
        CHECK(run_program(templates[in.template_id], in.values) == in.answer);
    }
    const auto suites = generate_control_suites(2, 20, 5);
    write_controls_jsonl(dir / "controls.jsonl", suites, "abc");
    const auto sb = read_controls_jsonl(dir / "controls.jsonl");
    for (std::size_t s = 0; s < 3; ++s) {
        REQUIRE(sb[s].eval.size() == 5);
        CHECK(sb[s].eval[3].prompt == suites[s].eval[3].prompt);
        CHECK(sb[s].train[7].target == suites[s].train[7].target);
    }
}
