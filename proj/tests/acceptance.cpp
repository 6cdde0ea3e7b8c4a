// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//
//   acceptance [--run-dir DIR] [--only N ...]
//
// Criteria 7 to 9 share one seeded end-to-end pipeline run in DIR (default
// ./acceptance_run, recreated on every invocation).

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "branching_oracle.hpp"
#include "cca/amplify.hpp"
#include "cca/pipeline.hpp"
#include "dcm_fixtures.hpp"

using namespace cca;
using cca::testing::bit_equal;
using cca::testing::planted_circuit;
using cca::testing::random_params;
using cca::testing::tiny_config;
using nlohmann::json;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 3) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// 1. analytic gradients against central differences of the double-precision
//    evaluation, on a two-layer model

Verdict gradient_fidelity() {
    const ModelConfig c = tiny_config(2, 41);
    const Parameters p = random_params(c, 0.35f, 41);
    const TokenSeq toks{1, 7, 3, 3, 9, 2, 5, 4};
    const int T = static_cast<int>(toks.size());
    Rng rng(1234);
    Mask mask = Mask::zeros(c);
    for (auto& m : mask.values) m = static_cast<float>(rng.uniform());
    Logits weights(T, c.vocab_size);
    for (auto& w : weights.data) w = static_cast<float>(rng.normal());
    const LossFn loss = [&](const Logits& logits, Logits& d) {
        d = weights;
        double s = 0;
        for (std::size_t i = 0; i < logits.data.size(); ++i) s += static_cast<double>(logits.data[i]) * weights.data[i];
        return s;
    };
    GradRequest req;
    req.mask = true;
    ForwardOptions opt;
    opt.mask = &mask;
    const auto analytic = loss_and_gradients(p, toks, loss, req, opt);

    const std::vector<double> w(p.values().begin(), p.values().end());
    const std::vector<double> m(mask.values.begin(), mask.values.end());
    auto eval = [&](const std::vector<double>& ww, const std::vector<double>& mm) {
        const auto lg = reference::forward(c, ww, toks, mm);
        double s = 0;
        for (std::size_t i = 0; i < lg.data.size(); ++i) s += lg.data[i] * weights.data[i];
        return s;
    };
    const double h = 1e-3;
    // relative error with a floor on the scale: entries near zero are compared absolutely
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-2}); };
    double worst = 0.0;
    int n_param = 0, n_mask = 0;
    for (int k = 0; k < 120; ++k, ++n_param) {
        const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w.size()) - 1));
        auto wp = w, wm = w;
        wp[i] += h;
        wm[i] -= h;
        worst = std::max(worst, rel(analytic.grads.params[i], (eval(wp, m) - eval(wm, m)) / (2 * h)));
    }
    for (int k = 0; k < 60; ++k, ++n_mask) {
        const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(m.size()) - 1));
        auto mp = m, mm = m;
        mp[i] += h;
        mm[i] -= h;
        worst = std::max(worst, rel(analytic.grads.mask[i], (eval(w, mp) - eval(w, mm)) / (2 * h)));
    }
    return {n_param + n_mask >= 100 && worst < 1e-3,
            std::to_string(n_param) + " parameter and " + std::to_string(n_mask) + " mask entries, worst rel err " +
                fmt(worst)};
}

// ---------------------------------------------------------------------------
// 2. (1 + m) h semantics

Parameters scaled_copy(const Parameters& p, const ComponentSlice& s, float factor, TensorKind only) {
    Parameters q = p;
    const auto& t = q.layout().tensor(only, s.id.layer);
    s.for_each([&](std::size_t i) {
        if (i >= t.offset && i < t.offset + t.size()) q.values()[i] *= factor;
    });
    return q;
}

Verdict mask_semantics() {
    const ModelConfig c = tiny_config(3, 42);
    const Parameters p = random_params(c, 0.3f, 42);
    const TokenSeq toks{2, 4, 6, 8, 10, 1, 3};
    const Logits base = forward(p, toks);
    const Mask zero = Mask::zeros(c);
    bool ok = bit_equal(base.data, forward(p, toks, &zero).data);
    const bool zero_ok = ok;

    // doubling a component equals doubling the weights that produce it; the
    // component's own activation is exactly 2h and every other activation of
    // the same or an earlier sublayer is bit-identical
    const auto acts = capture_activations(p, toks);
    int checked = 0;
    for (std::size_t idx = 0; idx < count_components(c); idx += 7) {
        const ComponentId id = component_from_index(c, idx);
        const TensorKind producer = id.kind == ComponentKind::q_head   ? TensorKind::wq
                                    : id.kind == ComponentKind::k_head ? TensorKind::wk
                                    : id.kind == ComponentKind::v_head ? TensorKind::wv
                                                                       : TensorKind::w_up;
        Mask m = Mask::zeros(c);
        m.values[idx] = 1.0f;
        const Parameters doubled = scaled_copy(p, component_slice(p, id), 2.0f, producer);
        ok = ok && bit_equal(forward(p, toks, &m).data, forward(doubled, toks).data);
        ok = ok && !bit_equal(forward(p, toks, &m).data, base.data);
        const auto masked_acts = capture_activations(p, toks, &m);
        const auto doubled_acts = capture_activations(doubled, toks);
        for (std::size_t k = 0; k < acts.size(); ++k) {
            const ComponentId other = acts[k].component;
            const bool upstream = other.layer < id.layer ||
                                  (other.layer == id.layer && (other.kind == ComponentKind::mlp_neuron) ==
                                                                  (id.kind == ComponentKind::mlp_neuron)) ||
                                  (other.layer == id.layer && id.kind == ComponentKind::mlp_neuron);
            if (!upstream) continue;
            ok = ok && bit_equal(acts[k].value.data, masked_acts[k].value.data);
            if (k == idx) {
                for (std::size_t e = 0; e < acts[k].value.data.size(); ++e) {
                    ok = ok && doubled_acts[k].value.data[e] == 2.0f * acts[k].value.data[e];
                }
            } else {
                ok = ok && bit_equal(acts[k].value.data, doubled_acts[k].value.data);
            }
        }
        ++checked;
    }
    return {ok, std::string("zero mask ") + (zero_ok ? "bit-exact" : "differs") + ", " + std::to_string(checked) +
                    " single-component doublings checked"};
}

// ---------------------------------------------------------------------------
// 3. clamp after every step; zero-gradient early stop

Verdict clamp_and_early_stop() {
    auto pc = planted_circuit();
    DcmConfig cfg;
    cfg.lambda = 1e-2;
    cfg.epochs = 5;
    cfg.learning_rate = 0.2;  // large steps push values against both bounds
    cfg.early_stop_fraction = 100.0;
    int steps = 0, violations = 0, at_bounds = 0;
    train_mask(pc.params, pc.records, cfg, [&](int, const Mask& m) {
        ++steps;
        for (float v : m.values) {
            violations += (v < 0.0f || v > 1.0f) ? 1 : 0;
            at_bounds += (v == 0.0f || v == 1.0f) ? 1 : 0;
        }
    });

    auto zero = planted_circuit(100);
    auto un = zero.params.tensor(TensorKind::unembedding);
    const int d = zero.params.config().d_model;
    std::copy_n(un.begin() + static_cast<std::ptrdiff_t>(zero.desired) * d, d,
                un.begin() + static_cast<std::ptrdiff_t>(zero.undesired) * d);
    DcmConfig zcfg;
    zcfg.lambda = 0.0;
    const auto res = train_mask(zero.params, zero.records, zcfg);
    const int batches = (100 + zcfg.batch_size - 1) / zcfg.batch_size;
    const int window = static_cast<int>(std::ceil(zcfg.early_stop_fraction * batches));
    const bool ok = steps > 0 && violations == 0 && at_bounds > 0 && res.early_stopped && res.steps <= window;
    return {ok, std::to_string(steps) + " steps clamped (" + std::to_string(at_bounds) +
                    " values at a bound); zero-gradient run stopped after " + std::to_string(res.steps) +
                    " of a " + std::to_string(window) + "-batch window"};
}

// ---------------------------------------------------------------------------
// 4. branching against exhaustive prefix re-decoding

Verdict branching_oracle() {
    const auto r = cca::testing::compare_branching_with_oracle();
    const bool ok = r.pairs >= 50 && r.mismatches == 0 && r.postcondition_failures == 0 && r.records > 0 &&
                    r.accounted == r.pairs;
    return {ok, std::to_string(r.pairs) + " pairs, " + std::to_string(r.checked) + " pivots compared, " +
                    std::to_string(r.mismatches) + " mismatches; " + std::to_string(r.records) + " records, " +
                    std::to_string(r.postcondition_failures) + " post-condition failures"};
}

// ---------------------------------------------------------------------------
// 5. planted circuit

Verdict planted_recovery() {
    const auto pc = planted_circuit();
    const ModelConfig& cfg = pc.params.config();
    const int planted = static_cast<int>(component_index(cfg, pc.planted));
    const auto flips = cca::testing::single_component_flips(pc.params, pc.records);
    DcmConfig base;
    base.seed = 3;
    const auto sweep = sweep_lambda(pc.params, pc.records, base, default_lambda_candidates(),
                                    flip_rate_scorer(pc.params, pc.records, base.threshold));
    const auto& best = sweep.trials[sweep.best];
    const auto support = binarize(best.result.mask, base.threshold);
    const bool contains = std::find(support.begin(), support.end(), planted) != support.end();
    const bool ok = flips == std::vector<int>{planted} && contains && support.size() <= 4;
    return {ok, "lambda " + fmt(best.lambda) + ": support of " + std::to_string(support.size()) +
                    (contains ? " includes" : " misses") + " the planted component"};
}

// ---------------------------------------------------------------------------
// 6. targeted update touches only the selected slices

Verdict update_exclusivity() {
    const auto pc = planted_circuit();
    const ModelConfig& cfg = pc.params.config();
    const std::vector<ComponentId> ids = {ComponentId{1, ComponentKind::mlp_neuron, 7},
                                          ComponentId{0, ComponentKind::q_head, 2},
                                          ComponentId{1, ComponentKind::v_head, 1},
                                          ComponentId{0, ComponentKind::k_head, 0}, component_from_index(cfg, 13)};
    std::vector<ComponentSlice> slices;
    for (const auto& id : ids) slices.push_back(component_slice(pc.params, id));
    const auto before = complement_hash(pc.params, slices);
    AmplifyConfig ac;
    bool inside_ok = true;
    const auto res = targeted_update(pc.params, pc.records, UpdateScope::of(ids), 1e-2, ac, [&](const Parameters& p) {
        inside_ok = inside_ok && complement_hash(p, slices) == before;
        return mean_logit_difference(p, pc.records);
    });
    std::vector<int> evaluated;
    for (const auto& e : res.log) {
        if (e.val_accuracy) evaluated.push_back(e.step);
    }
    const bool cadence = evaluated == std::vector<int>{2, 4, 6, 8, 10, 20, 30, 40, 50};
    const bool ok = inside_ok && complement_hash(res.best, slices) == before && res.best.hash() != pc.params.hash() &&
                    cadence && res.log.size() == 51;
    std::string steps;
    for (int s : evaluated) steps += (steps.empty() ? "" : ",") + std::to_string(s);
    return {ok, std::string("complement checksum ") + (inside_ok ? "unchanged" : "changed") + " at every evaluation; cadence {" +
                    steps + "}"};
}

// ---------------------------------------------------------------------------
// 7 to 9. seeded end-to-end run

struct EndToEnd {
    std::filesystem::path dir;
    json eval;
    json report;
    std::string error;
    double seconds = 0.0;
};

EndToEnd run_pipeline(const std::filesystem::path& dir) {
    EndToEnd e2e;
    e2e.dir = dir;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        std::filesystem::remove_all(dir);
        RunConfig cfg;  // defaults: 4-layer model, 100 templates, seeds 1..3
        cfg.configurations = {"cca_mask"};  // the rows criteria 7 to 9 read
        Pipeline pipe(cfg, dir, [](const std::string& msg) { std::cerr << msg << std::endl; });
        pipe.run_all();
        std::ifstream ev(dir / "eval.json");
        e2e.eval = json::parse(ev);
        std::ifstream rep(dir / "report" / "report.json");
        e2e.report = json::parse(rep);
    } catch (const std::exception& ex) {
        e2e.error = ex.what();
    }
    e2e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return e2e;
}

double pretrain_accuracy(const std::filesystem::path& dir) {
    std::map<std::string, std::string> header;
    load_checkpoint(dir / "model.ckpt", &header);
    return std::stod(header.at("pretrain.accuracy"));
}

struct RowStats {
    double delta = 0.0;  // mean test accuracy minus the original, in points
    double worst_mask = 0.0;
    std::map<std::string, double> control_deltas;  // mean per task, in points
    int seeds = 0;
};

RowStats row_stats(const json& eval, const std::string& configuration, const std::string& method) {
    RowStats s;
    const double orig = eval.at("original").at("test_accuracy");
    const auto orig_controls = eval.at("original").at("controls").get<std::map<std::string, double>>();
    for (const auto& r : eval.at("runs")) {
        if (r.at("configuration") != configuration || r.at("method") != method) continue;
        ++s.seeds;
        s.delta += 100.0 * (r.at("test_accuracy").get<double>() - orig);
        if (!r.at("mask_fraction").is_null()) s.worst_mask = std::max(s.worst_mask, r.at("mask_fraction").get<double>());
        for (const auto& [task, acc] : r.at("controls").get<std::map<std::string, double>>()) {
            s.control_deltas[task] += 100.0 * (acc - orig_controls.at(task));
        }
    }
    if (s.seeds > 0) {
        s.delta /= s.seeds;
        for (auto& [task, d] : s.control_deltas) d /= s.seeds;
    }
    return s;
}

Verdict end_to_end(const EndToEnd& e2e) {
    if (!e2e.error.empty()) return {false, "pipeline failed: " + e2e.error};
    const double band = pretrain_accuracy(e2e.dir);
    const RowStats s = row_stats(e2e.eval, "cca_mask", "branching");
    bool controls_ok = !s.control_deltas.empty();
    std::string ctl;
    for (const auto& [task, d] : s.control_deltas) {
        controls_ok = controls_ok && std::abs(d) <= 3.0;
        ctl += " " + task + " " + fmt(d);
    }
    const bool in_time = e2e.seconds < 3600.0;
    const bool ok = band >= 0.4 && band <= 0.8 && s.seeds == 3 && s.delta >= 3.0 && s.worst_mask <= 0.05 &&
                    controls_ok && in_time;
    return {ok, "pretrained accuracy " + fmt(band) + ", branching CCA delta " + fmt(s.delta) + " points over " +
                    std::to_string(s.seeds) + " seeds, largest mask " + fmt(100.0 * s.worst_mask) +
                    "%, control deltas" + ctl + ", pipeline " + fmt(e2e.seconds / 60.0) + " min" +
                    (in_time ? "" : " (over the 60 min budget)")};
}

Verdict branching_vs_prefix(const EndToEnd& e2e) {
    if (!e2e.error.empty()) return {false, "pipeline failed: " + e2e.error};
    const RowStats b = row_stats(e2e.eval, "cca_mask", "branching");
    const RowStats p = row_stats(e2e.eval, "cca_mask", "prefix");
    return {b.seeds == 3 && p.seeds == 3 && b.delta >= p.delta,
            "mean delta branching " + fmt(b.delta) + " vs prefix " + fmt(p.delta) + " points"};
}

Verdict reporting(const EndToEnd& e2e) {
    if (!e2e.error.empty()) return {false, "pipeline failed: " + e2e.error};
    try {
        validate_report_json(e2e.report);
    } catch (const FormatError& ex) {
        return {false, ex.what()};
    }
    const auto& cols = e2e.report.at("table1").at("columns");
    const std::vector<std::string> want = {"Configuration", "Dataset", "Dataset Size", "% Mask", "Acc", "Std", "Δ% Acc"};
    bool ok = cols.get<std::vector<std::string>>() == want;
    const auto& t9 = e2e.report.at("table9");
    for (const char* k : {"Q Heads", "K Heads", "V Heads", "MLP Neurons"}) {
        ok = ok && std::find(t9.at("columns").begin(), t9.at("columns").end(), k) != t9.at("columns").end();
    }
    ok = ok && !t9.at("rows").empty();
    for (const char* f : {"table1.csv", "table2.csv", "table9.csv", "report.md"}) {
        ok = ok && std::filesystem::exists(e2e.dir / "report" / f);
    }
    return {ok, std::to_string(e2e.report.at("table1").at("rows").size()) + " Table-1 rows, " +
                    std::to_string(t9.at("rows").size()) + " component-breakdown rows, schema valid"};
}

}  // namespace

int main(int argc, char** argv) {
    std::filesystem::path run_dir = "acceptance_run";
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        if (!std::strcmp(argv[i], "--run-dir") && i + 1 < argc) {
            run_dir = argv[++i];
        } else if (!std::strcmp(argv[i], "--only") && i + 1 < argc) {
            only.insert(std::stoi(argv[++i]));
        } else {
            std::cerr << "usage: acceptance [--run-dir DIR] [--only N ...]\n";
            return 1;
        }
    }
    auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

    struct Criterion {
        int id;
        const char* name;
        double budget_s;  // wall-clock limit for the check itself
        bool needs_run;   // reads the shared end-to-end run, which is timed separately
        std::function<Verdict()> check;
    };
    std::optional<EndToEnd> e2e;
    auto shared_run = [&]() -> const EndToEnd& {
        if (!e2e) e2e = run_pipeline(run_dir);
        return *e2e;
    };
    const std::vector<Criterion> criteria = {
        {1, "gradient fidelity", 60, false, gradient_fidelity},
        {2, "mask semantics", 1, false, mask_semantics},
        {3, "clamp and early stop", 60, false, clamp_and_early_stop},
        {4, "branching oracle equivalence", 600, false, branching_oracle},
        {5, "planted-circuit recovery", 300, false, planted_recovery},
        {6, "update exclusivity", 300, false, update_exclusivity},
        {7, "end-to-end toy experiment", 60, true, [&] { return end_to_end(shared_run()); }},
        {8, "branching >= prefix", 60, true, [&] { return branching_vs_prefix(shared_run()); }},
        {9, "reporting fidelity", 1, true, [&] { return reporting(shared_run()); }},
    };

    int failed = 0;
    for (const auto& c : criteria) {
        if (!wanted(c.id)) continue;
        if (c.needs_run) shared_run();
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.check();
        } catch (const std::exception& ex) {
            v = {false, std::string("exception: ") + ex.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (secs > c.budget_s) {
            v.pass = false;
            v.detail += ", over the " + fmt(c.budget_s) + " s budget";
        }
        failed += v.pass ? 0 : 1;
        std::cout << (v.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << v.detail << " ("
                  << std::fixed << std::setprecision(2) << secs << " s)" << std::defaultfloat << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
