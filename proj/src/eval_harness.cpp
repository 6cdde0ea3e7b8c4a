#include "cca/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace cca {

using nlohmann::json;

namespace {

/// Greedy traces for prompts, decoded `batch` at a time.
std::vector<Trace> greedy_traces(const Parameters& params, const Tokenizer& tok, const std::vector<TokenSeq>& prompts,
                                 const EvalOptions& opts) {
    const Decoder decoder(params);
    DecodeSpec spec;
    spec.mode = DecodeMode::greedy;
    spec.max_length = opts.max_length;
    const std::size_t batch = static_cast<std::size_t>(std::max(1, opts.batch_size));
    std::vector<Trace> out;
    out.reserve(prompts.size());
    for (std::size_t lo = 0; lo < prompts.size(); lo += batch) {
        const std::size_t hi = std::min(prompts.size(), lo + batch);
        const std::vector<DecodeSpec> specs(hi - lo, spec);
        auto traces = decode_batch(decoder, tok, std::span(prompts).subspan(lo, hi - lo), specs);
        for (auto& t : traces) out.push_back(std::move(t));
    }
    return out;
}

std::string fixed(double v, int digits = 2) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string signed_fixed(double v) { return (v >= 0 ? "+" : "") + fixed(v); }

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + '"';
}

std::string opt_fixed(const std::optional<double>& v) { return v ? fixed(*v) : "-"; }

std::vector<std::string> table1_cells(const ReportRow& r) {
    return {r.configuration,
            r.dataset,
            r.dataset_size ? std::to_string(*r.dataset_size) : "-",
            opt_fixed(r.mask_percent),
            fixed(r.accuracy),
            opt_fixed(r.std),
            signed_fixed(r.delta)};
}

std::vector<std::string> table9_cells(const std::string& label, const MaskReport& m) {
    return {label,
            std::to_string(m.q_heads),
            std::to_string(m.k_heads),
            std::to_string(m.v_heads),
            std::to_string(m.mlp_neurons),
            std::to_string(m.selected),
            std::to_string(m.total),
            fixed(m.percentage * 100.0)};
}

std::string csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << csv_field(cells[i]);
        os << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return os.str();
}

std::string markdown(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
        os << '|';
        for (const auto& c : cells) os << ' ' << c << " |";
        os << '\n';
    };
    line(header);
    os << '|';
    for (std::size_t i = 0; i < header.size(); ++i) os << " --- |";
    os << '\n';
    for (const auto& r : rows) line(r);
    return os.str();
}

std::vector<std::string> table2_header(const ExperimentReport& r) {
    std::vector<std::string> h = {"Configuration"};
    h.insert(h.end(), r.control_tasks.begin(), r.control_tasks.end());
    return h;
}

std::vector<std::vector<std::string>> table2_rows(const ExperimentReport& r) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& row : r.rows) {
        std::vector<std::string> cells = {row.configuration};
        for (const auto& task : r.control_tasks) {
            const auto it = row.control_deltas.find(task);
            cells.push_back(it == row.control_deltas.end() ? "-" : signed_fixed(it->second));
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path.string());
    os << text;
}

template <class T>
json opt_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

}  // namespace

EvalResult evaluate(const Parameters& params, const Tokenizer& tok, std::span<const Instance> instances,
                    const std::string& dataset, const EvalOptions& opts) {
    EvalResult r;
    r.dataset = dataset;
    r.n = static_cast<int>(instances.size());
    std::vector<TokenSeq> prompts;
    prompts.reserve(instances.size());
    for (const auto& inst : instances) prompts.push_back(prompt_tokens(tok, inst.question));
    const auto traces = greedy_traces(params, tok, prompts, opts);
    std::map<int, std::pair<int, int>> per;  // template -> (correct, total)
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const bool ok = answer_correct(traces[i], instances[i].answer);
        r.instance_ids.push_back(instances[i].instance_id);
        r.flags.push_back(ok);
        r.correct += ok ? 1 : 0;
        auto& [c, n] = per[instances[i].template_id];
        c += ok ? 1 : 0;
        ++n;
    }
    r.accuracy = r.n > 0 ? static_cast<double>(r.correct) / r.n : 0.0;
    for (const auto& [tid, cn] : per) r.per_template[tid] = static_cast<double>(cn.first) / cn.second;
    return r;
}

std::map<int, bool> correctness(const EvalResult& r) {
    std::map<int, bool> out;
    for (std::size_t i = 0; i < r.instance_ids.size(); ++i) out[r.instance_ids[i]] = r.flags[i];
    return out;
}

double control_accuracy(const Parameters& params, const Tokenizer& tok, std::span<const ControlExample> examples,
                        const EvalOptions& opts) {
    if (examples.empty()) return 0.0;
    std::vector<TokenSeq> prompts;
    prompts.reserve(examples.size());
    for (const auto& ex : examples) prompts.push_back(prompt_tokens(tok, ex.prompt));
    const auto traces = greedy_traces(params, tok, prompts, opts);
    int correct = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        TokenSeq want = tok.encode(examples[i].target);
        want.push_back(Tokenizer::eos);
        const auto got = traces[i].continuation();
        correct += traces[i].finished && std::equal(got.begin(), got.end(), want.begin(), want.end()) ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

std::map<std::string, double> evaluate_controls(const Parameters& params, const Tokenizer& tok,
                                                std::span<const ControlSuite> suites, const EvalOptions& opts) {
    std::map<std::string, double> out;
    for (const auto& s : suites) out[std::string(to_string(s.task))] = control_accuracy(params, tok, s.eval, opts);
    return out;
}

SeedStats seed_stats(std::span<const double> values) {
    SeedStats s;
    s.n = static_cast<int>(values.size());
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / s.n;
    if (s.n >= 2) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(ss / (s.n - 1));
    }
    return s;
}

ExperimentReport compare_configurations(double original_test_accuracy,
                                        const std::map<std::string, double>& original_controls,
                                        std::span<const ConfigurationRun> runs, const std::string& dataset) {
    ExperimentReport rep;
    rep.dataset = dataset;
    for (const auto& [task, acc] : original_controls) rep.control_tasks.push_back(task);
    for (const auto& run : runs) {
        if (run.test_accuracy.empty()) {
            throw InputError("configuration '" + run.configuration + "' has no seeds");
        }
        if (!run.control_accuracy.empty() && run.control_accuracy.size() != run.test_accuracy.size()) {
            throw InputError("configuration '" + run.configuration + "' has mismatched seed counts");
        }
        ReportRow row;
        row.configuration = run.configuration;
        row.dataset = dataset;
        row.dataset_size = run.dataset_size;
        if (run.mask_fraction) row.mask_percent = *run.mask_fraction * 100.0;
        std::vector<double> pct;
        for (double a : run.test_accuracy) pct.push_back(a * 100.0);
        const SeedStats st = seed_stats(pct);
        row.accuracy = st.mean;
        row.std = st.std;
        row.n_seeds = st.n;
        row.delta = st.mean - original_test_accuracy * 100.0;
        for (const auto& [task, base] : original_controls) {
            if (run.control_accuracy.empty()) break;
            std::vector<double> d;
            for (const auto& seed_acc : run.control_accuracy) d.push_back((seed_acc.at(task) - base) * 100.0);
            row.control_deltas[task] = seed_stats(d).mean;
        }
        rep.rows.push_back(std::move(row));
    }
    ReportRow orig;
    orig.configuration = "Original";
    orig.dataset = dataset;
    orig.accuracy = original_test_accuracy * 100.0;
    orig.n_seeds = 1;
    for (const auto& [task, base] : original_controls) orig.control_deltas[task] = 0.0;
    rep.rows.push_back(std::move(orig));
    return rep;
}

const std::vector<std::string>& table1_columns() {
    static const std::vector<std::string> c = {"Configuration", "Dataset", "Dataset Size", "% Mask",
                                               "Acc",           "Std",     "Δ% Acc"};
    return c;
}

const std::vector<std::string>& table9_columns() {
    static const std::vector<std::string> c = {"Configuration", "Q Heads", "K Heads", "V Heads",
                                               "MLP Neurons",   "Selected", "Total",  "% Mask"};
    return c;
}

std::string table1_csv(const ExperimentReport& r) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& row : r.rows) rows.push_back(table1_cells(row));
    return csv(table1_columns(), rows);
}

std::string table2_csv(const ExperimentReport& r) { return csv(table2_header(r), table2_rows(r)); }

std::string table9_csv(const ExperimentReport& r) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& [label, m] : r.masks) rows.push_back(table9_cells(label, m));
    return csv(table9_columns(), rows);
}

std::string report_markdown(const ExperimentReport& r) {
    std::ostringstream os;
    os << "# Experiment report\n\nconfig_hash: " << r.config_hash << "\n\n## Target task (exact match, %)\n\n";
    std::vector<std::vector<std::string>> t1;
    for (const auto& row : r.rows) t1.push_back(table1_cells(row));
    os << markdown(table1_columns(), t1);
    os << "\n## Control tasks (absolute difference to the original model, points)\n\n";
    os << markdown(table2_header(r), table2_rows(r));
    if (!r.masks.empty()) {
        std::vector<std::vector<std::string>> t9;
        for (const auto& [label, m] : r.masks) t9.push_back(table9_cells(label, m));
        os << "\n## Selected components by kind\n\n" << markdown(table9_columns(), t9);
    }
    return os.str();
}

json report_json(const ExperimentReport& r) {
    json t1 = json::array();
    for (const auto& row : r.rows) {
        t1.push_back({{"Configuration", row.configuration},
                      {"Dataset", row.dataset},
                      {"Dataset Size", opt_json(row.dataset_size)},
                      {"% Mask", opt_json(row.mask_percent)},
                      {"Acc", row.accuracy},
                      {"Std", opt_json(row.std)},
                      {"Δ% Acc", row.delta},
                      {"seeds", row.n_seeds}});
    }
    json t2 = json::array();
    for (const auto& row : r.rows) {
        json cells = {{"Configuration", row.configuration}};
        for (const auto& task : r.control_tasks) {
            const auto it = row.control_deltas.find(task);
            cells[task] = it == row.control_deltas.end() ? json(nullptr) : json(it->second);
        }
        t2.push_back(cells);
    }
    json t9 = json::array();
    for (const auto& [label, m] : r.masks) {
        t9.push_back({{"Configuration", label},
                      {"Q Heads", m.q_heads},
                      {"K Heads", m.k_heads},
                      {"V Heads", m.v_heads},
                      {"MLP Neurons", m.mlp_neurons},
                      {"Selected", m.selected},
                      {"Total", m.total},
                      {"% Mask", m.percentage * 100.0}});
    }
    json cols2 = table2_header(r);
    return {{"config_hash", r.config_hash},
            {"dataset", r.dataset},
            {"table1", {{"columns", table1_columns()}, {"rows", t1}}},
            {"table2", {{"columns", cols2}, {"rows", t2}}},
            {"table9", {{"columns", table9_columns()}, {"rows", t9}}}};
}

void validate_report_json(const json& j) {
    auto fail = [](const std::string& what) { throw FormatError("report schema: " + what); };
    if (!j.is_object() || !j.contains("config_hash") || !j["config_hash"].is_string()) fail("missing config_hash");
    auto check_table = [&](const char* name, const std::vector<std::string>& required,
                           const std::set<std::string>& nullable, const std::set<std::string>& text) {
        if (!j.contains(name) || !j[name].is_object()) fail(std::string("missing ") + name);
        const json& t = j[name];
        if (!t.contains("columns") || !t["columns"].is_array() || !t.contains("rows") || !t["rows"].is_array()) {
            fail(std::string(name) + " needs columns and rows");
        }
        const auto cols = t["columns"].get<std::vector<std::string>>();
        for (const auto& c : required) {
            if (std::find(cols.begin(), cols.end(), c) == cols.end()) fail(std::string(name) + " lacks column " + c);
        }
        for (const auto& row : t["rows"]) {
            for (const auto& c : cols) {
                if (!row.contains(c)) fail(std::string(name) + " row lacks " + c);
                const json& v = row[c];
                const bool ok = text.count(c) ? v.is_string() : (v.is_number() || (v.is_null() && nullable.count(c)));
                if (!ok) fail(std::string(name) + " field " + c + " has the wrong type");
            }
        }
    };
    check_table("table1", table1_columns(), {"Dataset Size", "% Mask", "Std"}, {"Configuration", "Dataset"});
    check_table("table9", table9_columns(), {}, {"Configuration"});
    if (!j.contains("table2") || !j["table2"].contains("columns")) fail("missing table2");
    std::set<std::string> controls;
    for (const auto& c : j["table2"]["columns"]) controls.insert(c.get<std::string>());
    controls.erase("Configuration");
    check_table("table2", {"Configuration"}, controls, {"Configuration"});
}

void write_report(const std::filesystem::path& dir, const ExperimentReport& r) {
    std::filesystem::create_directories(dir);
    const json j = report_json(r);
    validate_report_json(j);
    write_text(dir / "table1.csv", table1_csv(r));
    write_text(dir / "table2.csv", table2_csv(r));
    write_text(dir / "table9.csv", table9_csv(r));
    write_text(dir / "report.md", report_markdown(r));
    write_text(dir / "report.json", j.dump(2) + "\n");
}

void check_split_hygiene(const Corpus& corpus, std::span<const int> consumed_ids, const std::string& artifact) {
    std::set<int> test;
    for (const auto& inst : corpus.instances) {
        if (inst.split == Split::test) test.insert(inst.instance_id);
    }
    for (int id : consumed_ids) {
        if (test.count(id)) {
            throw InputError(artifact + " consumes test instance " + std::to_string(id));
        }
    }
}

}  // namespace cca
