#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <sstream>

#include "cca/eval_harness.hpp"
#include "fixtures.hpp"

using namespace cca;
using cca::testing::bigram_params;

namespace {

const Tokenizer& tok() {
    static const Tokenizer t = Tokenizer::standard();
    return t;
}

Token id(const char* w) { return tok().id(w); }

// Always answers "#### 5 <eos>" after "?", and "a <eos>" after "->".
Parameters fixed_answer_model(bool with_marker = true) {
    return bigram_params(tok().size(), [with_marker](int cur, int next) -> double {
        if (cur == id("?")) return next == (with_marker ? id("####") : id("5")) ? 10.0 : 0.0;
        if (cur == id("####")) return next == id("5") ? 10.0 : 0.0;
        if (cur == id("5")) return next == Tokenizer::eos ? 10.0 : 0.0;
        if (cur == id("->")) return next == id("a") ? 10.0 : 0.0;
        if (cur == id("a")) return next == Tokenizer::eos ? 10.0 : 0.0;
        return next == Tokenizer::eos ? 1.0 : 0.0;
    });
}

std::vector<Instance> instances(const std::vector<std::pair<int, std::int64_t>>& template_and_answer) {
    std::vector<Instance> out;
    for (std::size_t i = 0; i < template_and_answer.size(); ++i) {
        Instance in;
        in.template_id = template_and_answer[i].first;
        in.instance_id = static_cast<int>(i) + 100;
        in.question = "how many pens does tom have ?";
        in.answer = template_and_answer[i].second;
        out.push_back(in);
    }
    return out;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

ExperimentReport sample_report() {
    ConfigurationRun mask{"CCA w mask (Branching)", 120, 0.0125, {0.5, 0.6, 0.7}, {}};
    ConfigurationRun lora{"LoRA", 500, std::nullopt, {0.55}, {}};
    for (double d : {0.01, 0.0, -0.01}) mask.control_accuracy.push_back({{"copy", 0.9 + d}, {"max", 0.8}});
    lora.control_accuracy.push_back({{"copy", 0.85}, {"max", 0.8}});
    const std::vector<ConfigurationRun> runs = {mask, lora};
    auto rep = compare_configurations(0.52, {{"copy", 0.9}, {"max", 0.8}}, runs, "toy-math");
    rep.config_hash = "0123abcd";
    MaskReport m;
    m.q_heads = 1;
    m.mlp_neurons = 4;
    m.selected = 5;
    m.total = 400;
    m.percentage = 5.0 / 400;
    rep.masks.emplace_back("CCA w mask (Branching)", m);
    return rep;
}

}  // namespace

TEST_CASE("exact match against an independent recount") {
    const auto p = fixed_answer_model();
    const auto hash = p.hash();
    const auto insts = instances({{0, 5}, {0, 6}, {1, 5}, {1, 5}, {2, 50}, {2, 0}, {3, 5}});
    const EvalResult r = evaluate(p, tok(), insts, "val", EvalOptions{3, 0});
    int recount = 0;
    for (const auto& in : insts) recount += in.answer == 5 ? 1 : 0;
    CHECK(r.correct == recount);
    CHECK(r.n == 7);
    CHECK(r.accuracy == doctest::Approx(4.0 / 7.0));
    CHECK(r.accuracy * r.n == doctest::Approx(static_cast<double>(r.correct)));
    CHECK(r.per_template.at(0) == 0.5);
    CHECK(r.per_template.at(1) == 1.0);
    CHECK(r.per_template.at(2) == 0.0);
    CHECK(correctness(r).at(100) == true);
    CHECK(correctness(r).at(101) == false);
    CHECK(p.hash() == hash);

    // batch size does not change the verdicts
    CHECK(evaluate(p, tok(), insts, "val", EvalOptions{64, 0}).flags == r.flags);
}

TEST_CASE("all correct and missing marker") {
    const auto insts = instances({{0, 5}, {1, 5}});
    CHECK(evaluate(fixed_answer_model(), tok(), insts).accuracy == 1.0);
    CHECK(evaluate(fixed_answer_model(false), tok(), insts).accuracy == 0.0);
    CHECK(evaluate(fixed_answer_model(), tok(), std::vector<Instance>{}).accuracy == 0.0);
}

TEST_CASE("control accuracy requires the exact target and eos") {
    const auto p = fixed_answer_model();
    const std::vector<ControlExample> ex = {
        {ControlTask::copy, "copy : a ->", "a"},
        {ControlTask::copy, "copy : b ->", "b"},
        {ControlTask::copy, "copy : a a ->", "a a"},
        {ControlTask::recall, "recall : c 1 a 2 ? c ->", "a"},
    };
    CHECK(control_accuracy(p, tok(), ex) == 0.5);
    std::vector<ControlSuite> suites(2);
    suites[0].task = ControlTask::copy;
    suites[0].eval = {ex[0], ex[1]};
    suites[1].task = ControlTask::max;
    suites[1].eval = {{ControlTask::max, "max : 3 ->", "3"}};
    const auto acc = evaluate_controls(p, tok(), suites);
    CHECK(acc.at("copy") == 0.5);
    CHECK(acc.at("max") == 0.0);
}

TEST_CASE("seed statistics use the sample estimator") {
    const std::vector<double> three = {0.5, 0.6, 0.7};
    const auto s = seed_stats(three);
    CHECK(s.mean == doctest::Approx(0.6));
    REQUIRE(s.std.has_value());
    CHECK(*s.std == doctest::Approx(0.1));
    const std::vector<double> one = {0.4};
    CHECK_FALSE(seed_stats(one).std.has_value());
}

TEST_CASE("an unchanged checkpoint has zero deltas") {
    const std::map<std::string, double> controls = {{"copy", 0.9}, {"max", 0.7}, {"recall", 0.6}};
    ConfigurationRun same{"CCA w mask (Prefix)", 10, 0.01, {0.45, 0.45}, {controls, controls}};
    const std::vector<ConfigurationRun> runs = {same};
    const auto rep = compare_configurations(0.45, controls, runs, "toy");
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].delta == 0.0);
    for (const auto& [task, d] : rep.rows[0].control_deltas) CHECK(d == 0.0);
    CHECK(rep.rows[0].std.value() == 0.0);
    CHECK(rep.rows[1].configuration == "Original");
    CHECK_FALSE(rep.rows[1].std.has_value());

    ConfigurationRun none{"x", 1, std::nullopt, {}, {}};
    CHECK_THROWS_AS(compare_configurations(0.5, controls, std::vector<ConfigurationRun>{none}, "toy"), InputError);
}

TEST_CASE("report tables carry every column") {
    const auto rep = sample_report();
    const auto& r0 = rep.rows[0];
    CHECK(r0.accuracy == doctest::Approx(60.0));
    CHECK(r0.std.value() == doctest::Approx(10.0));
    CHECK(r0.delta == doctest::Approx(8.0));
    CHECK(r0.mask_percent.value() == doctest::Approx(1.25));
    CHECK(r0.control_deltas.at("copy") == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(rep.rows[1].control_deltas.at("copy") == doctest::Approx(-5.0));

    const std::string t1 = table1_csv(rep);
    CHECK(t1.rfind("Configuration,Dataset,Dataset Size,% Mask,Acc,Std,Δ% Acc\n", 0) == 0);
    CHECK(t1.find("CCA w mask (Branching),toy-math,120,1.25,60.00,10.00,+8.00\n") != std::string::npos);
    CHECK(t1.find("LoRA,toy-math,500,-,55.00,-,+3.00\n") != std::string::npos);
    CHECK(t1.find("Original,toy-math,-,-,52.00,-,+0.00\n") != std::string::npos);
    CHECK(table2_csv(rep).rfind("Configuration,copy,max\n", 0) == 0);
    CHECK(table9_csv(rep) ==
          "Configuration,Q Heads,K Heads,V Heads,MLP Neurons,Selected,Total,% Mask\n"
          "CCA w mask (Branching),1,0,0,4,5,400,1.25\n");
    const std::string md = report_markdown(rep);
    CHECK(md.find("| Configuration | Dataset | Dataset Size | % Mask | Acc | Std | Δ% Acc |") != std::string::npos);
    CHECK(md.find("| Configuration | Q Heads | K Heads | V Heads | MLP Neurons |") != std::string::npos);
}

TEST_CASE("report json is schema-checked") {
    const auto rep = sample_report();
    const auto j = report_json(rep);
    CHECK_NOTHROW(validate_report_json(j));
    auto missing = j;
    missing["table1"]["columns"].erase(missing["table1"]["columns"].begin() + 5);
    CHECK_THROWS_AS(validate_report_json(missing), FormatError);
    auto mistyped = j;
    mistyped["table1"]["rows"][0]["Acc"] = "high";
    CHECK_THROWS_AS(validate_report_json(mistyped), FormatError);
    auto no9 = j;
    no9.erase("table9");
    CHECK_THROWS_AS(validate_report_json(no9), FormatError);

    const auto dir = cca::testing::scratch_dir("eval_report");
    write_report(dir, rep);
    for (const char* f : {"table1.csv", "table2.csv", "table9.csv", "report.md", "report.json"}) {
        CHECK(std::filesystem::exists(dir / f));
    }
    CHECK(slurp(dir / "table1.csv") == table1_csv(rep));
    CHECK_NOTHROW(validate_report_json(nlohmann::json::parse(slurp(dir / "report.json"))));
}

TEST_CASE("split hygiene") {
    Corpus c = generate_corpus(3, 10, 4);
    split(c, 4);
    std::vector<int> train_ids, test_ids;
    for (const auto& in : c.instances) (in.split == Split::test ? test_ids : train_ids).push_back(in.instance_id);
    REQUIRE(!test_ids.empty());
    CHECK_NOTHROW(check_split_hygiene(c, train_ids, "records"));
    train_ids.push_back(test_ids[1]);
    CHECK_THROWS_AS(check_split_hygiene(c, train_ids, "records"), InputError);
}
