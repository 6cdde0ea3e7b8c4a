#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cca/localization.hpp"
#include "branching_oracle.hpp"
#include "fixtures.hpp"

using namespace cca;
using cca::testing::bigram_params;

namespace {

const Tokenizer& tok() {
    static const Tokenizer t = Tokenizer::standard();
    return t;
}

Token id(const char* w) { return tok().id(w); }

TracePair make_pair(const TokenSeq& prompt, const TokenSeq& correct_gen, const TokenSeq& incorrect_gen,
                    Orientation o, std::int64_t gold = 0) {
    TracePair p;
    p.instance_id = 1;
    p.gold_answer = gold;
    p.orientation = o;
    p.prompt_length = static_cast<int>(prompt.size());
    p.correct = prompt;
    p.correct.insert(p.correct.end(), correct_gen.begin(), correct_gen.end());
    p.incorrect = prompt;
    p.incorrect.insert(p.incorrect.end(), incorrect_gen.begin(), incorrect_gen.end());
    return p;
}

}  // namespace

TEST_CASE("prefix pivot is the first mismatch") {
    const Token a = id("a"), b = id("b"), c = id("c"), d = id("d"), x = id("e"), y = id("f");
    const TokenSeq prompt = {Tokenizer::bos, id("copy")};
    const auto pair = make_pair(prompt, {a, b, c, d}, {a, b, x, y}, Orientation::greedy_correct);
    const PivotResult r = prefix_pivot(pair);
    CHECK(r.pivotal == 2);
    CHECK(r.intervention == 1);
    CHECK(r.prefix == TokenSeq{Tokenizer::bos, id("copy"), a, b});
    CHECK(r.prefix.back() == b);
    CHECK(r.desired == c);
    CHECK(r.undesired == x);
}

TEST_CASE("prefix pivot errors") {
    const TokenSeq prompt = {Tokenizer::bos};
    const Token a = id("a"), b = id("b");
    auto reason = [](const TracePair& p) {
        try {
            prefix_pivot(p);
        } catch (const LocalizationError& e) {
            return e.reason();
        }
        FAIL("expected a localization error");
        return PivotFailure::no_pivot;
    };
    CHECK(reason(make_pair(prompt, {a, b}, {a, b}, Orientation::greedy_correct)) == PivotFailure::no_divergence);
    CHECK(reason(make_pair(prompt, {a, b}, {a, b, a}, Orientation::greedy_correct)) == PivotFailure::no_divergence);
    CHECK(reason(make_pair(prompt, {b, a}, {a, a}, Orientation::greedy_correct)) ==
          PivotFailure::no_intervention_token);
}

TEST_CASE("punctuation divergence puts the intervention on the preceding word") {
    const TokenSeq prompt = tok().encode("<bos> tom has 3 apples .");
    const auto pair = make_pair(prompt, tok().encode("apples : 3 + 2 = 5"), tok().encode("apples ; 3 + 2 = 6"),
                                Orientation::greedy_incorrect);
    const PivotResult r = prefix_pivot(pair);
    CHECK(tok().word(r.prefix.back()) == "apples");
    CHECK(r.desired == id(":"));
    CHECK(r.undesired == id(";"));
}

TEST_CASE("branching finds the flipping token past a harmless divergence") {
    // greedy path after the prompt: apples -> : -> #### -> 5 -> <eos>
    // the sampled trace detours through "+" (harmless) and then picks 4
    const Token colon = id(":"), plus = id("+"), marker = id("####"), five = id("5"), four = id("4");
    const Parameters p = bigram_params(tok().size(), [&](int cur, int next) -> double {
        if (cur == id("?")) return next == id("apples") ? 5.0 : 0.0;
        if (cur == id("apples")) return next == colon ? 5.0 : next == plus ? 4.0 : 0.0;
        if (cur == colon || cur == plus) return next == marker ? 5.0 : 0.0;
        if (cur == marker) return next == five ? 5.0 : next == four ? 4.5 : 0.0;
        return next == Tokenizer::eos ? 5.0 : 0.0;
    });
    const Decoder dec(p);
    const TokenSeq prompt = tok().encode("<bos> how many apples ?");
    const TokenSeq greedy = {id("apples"), colon, marker, five, Tokenizer::eos};
    const TokenSeq sampled = {id("apples"), plus, marker, four, Tokenizer::eos};

    SUBCASE("greedy correct") {
        const auto pair = make_pair(prompt, greedy, sampled, Orientation::greedy_correct, 5);
        const PivotResult pre = prefix_pivot(pair);
        CHECK(pre.pivotal == 1);
        const PivotResult br = branching_pivot(pair, dec, tok());
        CHECK(br.divergence == 1);
        CHECK(br.pivotal == 3);
        CHECK(br.desired == five);
        CHECK(br.undesired == four);
        CHECK(br.prefix.back() == marker);
        CHECK(br.redecodes == 2);
        CHECK(br.redecodes <= static_cast<int>(sampled.size()) - br.divergence + 1);
        TokenSeq with_desired = br.prefix, with_undesired = br.prefix;
        with_desired.push_back(br.desired);
        with_undesired.push_back(br.undesired);
        CHECK(completes_correctly(dec, tok(), with_desired, 5));
        CHECK_FALSE(completes_correctly(dec, tok(), with_undesired, 5));
    }

    SUBCASE("greedy incorrect keeps desired on the correct side") {
        const auto pair = make_pair(prompt, sampled, greedy, Orientation::greedy_incorrect, 4);
        const PivotResult br = branching_pivot(pair, dec, tok());
        CHECK(br.pivotal == 3);
        CHECK(br.desired == four);
        CHECK(br.undesired == five);
        TokenSeq with_desired = br.prefix, with_undesired = br.prefix;
        with_desired.push_back(br.desired);
        with_undesired.push_back(br.undesired);
        CHECK(completes_correctly(dec, tok(), with_desired, 4));
        CHECK_FALSE(completes_correctly(dec, tok(), with_undesired, 4));
    }

    SUBCASE("single-step divergence: both methods agree") {
        const TokenSeq direct = {id("apples"), colon, marker, four, Tokenizer::eos};
        const auto pair = make_pair(prompt, greedy, direct, Orientation::greedy_correct, 5);
        CHECK(prefix_pivot(pair).pivotal == branching_pivot(pair, dec, tok()).pivotal);
    }
}

TEST_CASE("branching matches an exhaustive re-decoding oracle on generated pairs") {
    const auto r = cca::testing::compare_branching_with_oracle();
    MESSAGE("pairs " << r.pairs << ", checked " << r.checked << ", pivots past the divergence " << r.late_flips);
    REQUIRE(r.pairs >= 50);
    CHECK(r.checked >= 40);
    CHECK(r.mismatches == 0);
    // when the first differing token already flips, the prefix method agrees
    CHECK(r.prefix_disagreements == 0);
    CHECK(r.late_flips > 0);
    CHECK(r.orientations == 3);
    CHECK(r.accounted == r.pairs);
    CHECK(r.records > 0);
    CHECK(r.postcondition_failures == 0);
}

TEST_CASE("prefix dataset records and file round trip") {
    const TokenSeq prompt = {Tokenizer::bos, id("copy")};
    const Token a = id("a"), b = id("b"), c = id("c");
    std::vector<TracePair> pairs = {make_pair(prompt, {a, b, c}, {a, c, c}, Orientation::greedy_correct),
                                    make_pair(prompt, {a, b}, {a, b}, Orientation::greedy_correct),
                                    make_pair(prompt, {b}, {a}, Orientation::greedy_incorrect)};
    pairs[2].instance_id = 3;
    const Parameters p = bigram_params(tok().size(), [](int, int) { return 0.0; });
    const Decoder dec(p);
    const auto ds = build_dataset(pairs, LocalizationMethod::prefix, dec, tok());
    REQUIRE(ds.records.size() == 1);
    CHECK(ds.report.skipped.at(PivotFailure::no_divergence) == 1);
    CHECK(ds.report.skipped.at(PivotFailure::no_intervention_token) == 1);
    const auto& r = ds.records[0];
    CHECK(r.prefix == TokenSeq{Tokenizer::bos, id("copy"), a});
    CHECK(r.desired == b);
    CHECK(r.undesired == c);

    const auto dir = cca::testing::scratch_dir("loc_io");
    write_records_jsonl(dir / "records.jsonl", ds.records, "h");
    const auto back = read_records_jsonl(dir / "records.jsonl");
    REQUIRE(back.size() == 1);
    CHECK(back[0].prefix == r.prefix);
    CHECK(back[0].desired == r.desired);
    CHECK(back[0].undesired == r.undesired);
    CHECK(back[0].method == LocalizationMethod::prefix);
}
