#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dcm_fixtures.hpp"

using namespace cca;
using cca::testing::planted_circuit;
using cca::testing::tiny_config;

TEST_CASE("loss is the negative logit gap plus the weighted mask sum") {
    const ModelConfig cfg = tiny_config(1);
    std::vector<float> logits(static_cast<std::size_t>(cfg.vocab_size), 0.0f);
    logits[3] = 2.0f;
    logits[4] = 1.0f;
    Mask m = Mask::zeros(cfg);
    m.values[0] = 1.0f;
    m.values[1] = 1.0f;
    m.values[2] = 1.0f;
    CHECK(dcm_loss(logits, 3, 4, m, 0.01) == doctest::Approx(-0.97).epsilon(1e-12));
    CHECK(dcm_loss(logits, 3, 4, m, 0.0) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(dcm_loss(logits, 3, cfg.vocab_size, m, 0.01), IndexError);
}

TEST_CASE("mask gradient of the loss matches finite differences") {
    const ModelConfig cfg = tiny_config(2, 13);
    const Parameters p = cca::testing::random_params(cfg, 0.4f, 13);
    Mask mask = Mask::zeros(cfg);
    Rng rng(2);
    for (auto& v : mask.values) v = static_cast<float>(rng.uniform());
    const TokenSeq toks = {1, 5, 2, 7, 9};
    const Token desired = 3, undesired = 8;
    const double lambda = 0.01;
    GradRequest req;
    req.params = GradRequest::Params::none;
    req.mask = true;
    ForwardOptions opt;
    opt.mask = &mask;
    const auto lg = loss_and_gradients(p, toks, logit_difference_loss(4, desired, undesired), req, opt);

    const std::vector<double> w(p.values().begin(), p.values().end());
    auto loss_at = [&](const std::vector<double>& m) {
        const auto l = reference::forward(cfg, w, toks, m);
        double s = 0;
        for (double v : m) s += v;
        return -(l.at(4, desired) - l.at(4, undesired)) + lambda * s;
    };
    const std::vector<double> m0(mask.values.begin(), mask.values.end());
    const double h = 1e-3;
    int checked = 0;
    for (std::size_t i = 0; i < m0.size(); i += 3) {
        auto mp = m0, mm = m0;
        mp[i] += h;
        mm[i] -= h;
        const double fd = (loss_at(mp) - loss_at(mm)) / (2 * h);
        const double an = lg.grads.mask[i] + lambda;
        CHECK(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-2}) < 1e-3);
        ++checked;
    }
    CHECK(checked >= 10);
}

TEST_CASE("binarize and report") {
    const ModelConfig cfg = tiny_config(1);
    Mask m = Mask::zeros(cfg);
    m.values[0] = 0.9f;
    m.values[1] = 0.1f;
    m.values[2] = 0.5f;
    CHECK(binarize(Mask{{0.9f, 0.1f, 0.5f}}, 0.5f) == std::vector<int>{0, 2});
    CHECK(binarize(Mask::zeros(cfg), 0.5f).empty());
    const MaskReport r = mask_report(cfg, m, 0.5f);
    CHECK(r.selected == 2);
    CHECK(r.total == count_components(cfg));
    CHECK(r.q_heads + r.k_heads + r.v_heads + r.mlp_neurons == r.selected);
    CHECK(r.q_heads == 2);
    // 5 of 1000 is half a percent
    Mask big{std::vector<float>(1000, 0.0f)};
    for (int i = 0; i < 5; ++i) big.values[static_cast<std::size_t>(i) * 100] = 1.0f;
    CHECK(binarize(big, 0.5f).size() / 1000.0 == doctest::Approx(0.005));
    CHECK(mask_report_csv_row("x", r).rfind("x,2,0,0,0,2,", 0) == 0);
}

TEST_CASE("training keeps the mask clamped and leaves the model untouched") {
    auto pc = planted_circuit();
    const auto before = pc.params.hash();
    DcmConfig cfg;
    cfg.lambda = 1e-2;
    cfg.epochs = 3;
    cfg.early_stop_fraction = 100.0;  // window far beyond the run
    int steps = 0;
    const auto res = train_mask(pc.params, pc.records, cfg, [&](int, const Mask& m) {
        ++steps;
        for (float v : m.values) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
    });
    CHECK(steps == 3 * 6);
    CHECK(res.steps == steps);
    CHECK(pc.params.hash() == before);
}

TEST_CASE("zero-gradient fixture halts inside the first window") {
    auto pc = planted_circuit(100);
    // desired and undesired share an unembedding row: the logit gap is 0
    auto un = pc.params.tensor(TensorKind::unembedding);
    const int d = pc.params.config().d_model;
    std::copy_n(un.begin() + static_cast<std::ptrdiff_t>(pc.desired) * d, d,
                un.begin() + static_cast<std::ptrdiff_t>(pc.undesired) * d);
    DcmConfig cfg;
    cfg.lambda = 0.0;
    const auto res = train_mask(pc.params, pc.records, cfg);
    // 100 records / batch 8 = 13 batches; 20% of them rounds up to 3
    CHECK(res.early_stopped);
    CHECK(res.steps == 3);
    CHECK(res.epochs_run == 1);
    for (float v : res.mask.values) CHECK(v == 0.5f);
}

TEST_CASE("planted circuit is recovered and agrees with exhaustive search") {
    const auto pc = planted_circuit();
    const ModelConfig& cfg = pc.params.config();
    // baseline: the undesired token wins everywhere
    for (const auto& r : pc.records) {
        const Logits l = forward(pc.params, r.prefix);
        REQUIRE(l.at(l.rows - 1, pc.desired) < l.at(l.rows - 1, pc.undesired));
    }
    const auto flips = cca::testing::single_component_flips(pc.params, pc.records);
    const int planted = static_cast<int>(component_index(cfg, pc.planted));
    REQUIRE(flips == std::vector<int>{planted});
    CHECK(flip_rate(pc.params, pc.records) == 0.0);

    DcmConfig base;
    base.seed = 3;
    const auto sweep = sweep_lambda(pc.params, pc.records, base, default_lambda_candidates(),
                                    flip_rate_scorer(pc.params, pc.records, base.threshold));
    REQUIRE(sweep.trials.size() == 4);
    const auto& best = sweep.trials[sweep.best].result;
    const auto support = binarize(best.mask, base.threshold);
    CHECK(std::find(support.begin(), support.end(), planted) != support.end());
    CHECK(support.size() <= 4);

    // larger lambda never ends with a strictly larger mask sum
    for (std::size_t i = 0; i + 1 < sweep.trials.size(); ++i) {
        REQUIRE(sweep.trials[i].lambda > sweep.trials[i + 1].lambda);
        double a = 0, b = 0;
        for (float v : sweep.trials[i].result.mask.values) a += v;
        for (float v : sweep.trials[i + 1].result.mask.values) b += v;
        CHECK(a <= b + 1e-6);
    }
}

TEST_CASE("sweep picks the first best candidate") {
    const auto pc = planted_circuit(16);
    DcmConfig base;
    base.epochs = 1;
    const std::vector<double> one = {5e-3};
    const auto single = sweep_lambda(pc.params, pc.records, base, one, {});
    CHECK(single.best == 0);
    CHECK(single.trials[0].lambda == 5e-3);
    const std::vector<double> three = {1e-2, 1e-3, 1e-4};
    const auto tied = sweep_lambda(pc.params, pc.records, base, three, [](const Mask&, const DcmResult&) { return 1.0; });
    CHECK(tied.best == 0);
}

TEST_CASE("mask file round trip") {
    const ModelConfig cfg = tiny_config(2);
    Mask m = Mask::zeros(cfg);
    m.values[4] = 0.75f;
    m.values[9] = 0.25f;
    const auto dir = cca::testing::scratch_dir("dcm_io");
    write_mask_json(dir / "mask.json", cfg, m, 0.5f, "abc", 1e-3);
    float th = 0;
    const Mask back = read_mask_json(dir / "mask.json", &th);
    CHECK(back.values == m.values);
    CHECK(th == 0.5f);
}
