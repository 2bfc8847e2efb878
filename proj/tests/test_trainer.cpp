#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace hat;
using Catch::Approx;

namespace {

bool same_bits(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Plain optimizer step on the cross-entropy gradient, the reference for reductions.
std::vector<double> baseline_step(const Architecture& arch, std::vector<double> params, BatchView b,
                                  const TrainConfig& cfg, OptimizerState<double>& st, double lr) {
    ad::Tape<double> t(params.size());
    const auto g = ad::backprop(t, loss_builder<double>(arch, b)(t, params), false);
    optimizer_step<double>(cfg, lr, params, g.values.values, st);
    return params;
}

// The probes hat_step draws for a given step counter.
std::vector<std::vector<double>> step_probes(const TrainConfig& cfg, std::size_t step, std::size_t d,
                                             const ParamMask& mask) {
    const std::uint64_t s = substream(cfg.seed ^ 0x5851f42d4c957f2dULL, step)();
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < cfg.probes; ++i) out.push_back(rademacher(d, mask, probe_seed(s, i)));
    return out;
}

} // namespace

TEST_CASE("gate follows the median-threshold rule", "[trainer][gate]") {
    GateState s;
    s.tau = 2.0;
    const std::vector<double> a{1, 5, 3};
    auto d = gate(a, s);
    CHECK(d.regularize);
    CHECK(d.median == 3.0);
    CHECK(s.tau == 2.0);

    const std::vector<double> b{1, 2, 1};
    d = gate(b, s);
    CHECK_FALSE(d.regularize);
    CHECK(s.tau == 1.0);

    GateState fresh;
    const std::vector<double> c{0.5, 0.1};
    CHECK(gate(c, fresh).regularize);
    CHECK(median(std::vector<double>{4, 1, 3, 2}) == 2.0);  // lower median
    CHECK_THROWS_AS(median(std::vector<double>{}), ArgumentError);

    GateState always;
    always.tau = 100.0;
    CHECK(gate(b, 1.0, always, Gating::always).regularize);
    CHECK(always.tau == 100.0);

    GateState avg;
    CHECK(gate(b, 3.0, avg, Gating::running_average).regularize);
    CHECK_FALSE(gate(b, 2.0, avg, Gating::running_average).regularize);
    CHECK(gate(b, 4.0, avg, Gating::running_average).regularize);
    CHECK(avg.tau == Approx(3.0));
}

TEST_CASE("min-max normalisation", "[trainer]") {
    const std::vector<double> ev{5.0, 3.0, 1.0};
    double scale = 0.0;
    CHECK(minmax_normalize(3.0, ev, &scale) == 0.5);
    CHECK(scale == 0.25);
    const std::vector<double> flat{2.0, 2.0};
    CHECK(minmax_normalize(2.0, flat, &scale) == 0.0);
    CHECK(scale == 1.0);
}

TEST_CASE("optimizer steps follow the usual update rules", "[trainer]") {
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::sgd;
    cfg.momentum = 0.9;
    std::vector<double> p{1.0}, g{0.5};
    OptimizerState<double> st;
    optimizer_step<double>(cfg, 0.1, p, g, st);
    CHECK(p[0] == 1.0 - 0.1 * 0.5);  // first buffer is the gradient itself
    optimizer_step<double>(cfg, 0.1, p, g, st);
    CHECK(p[0] == Approx(0.95 - 0.1 * (0.9 * 0.5 + 0.5)));

    cfg.optimizer = OptimizerKind::rmsprop;
    std::vector<double> q{1.0};
    OptimizerState<double> rs;
    optimizer_step<double>(cfg, 0.01, q, g, rs);
    const double v = 0.01 * 0.25;
    CHECK(q[0] == Approx(1.0 - 0.01 * 0.5 / (std::sqrt(v) + 1e-8)));
}

TEST_CASE("config validation and presets", "[trainer]") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.alpha == 1.0);
    CHECK(c.probes == 50);
    CHECK(c.optimizer == OptimizerKind::rmsprop);
    CHECK(c.rms_decay == 0.99);
    CHECK(c.rms_eps == 1e-8);
    for (auto bad : {-1.0, std::nan("")}) {
        TrainConfig x;
        x.alpha = bad;
        CHECK_THROWS_AS(x.validate(), ArgumentError);
    }
    TrainConfig x;
    x.probes = 0;
    CHECK_THROWS_AS(x.validate(), ArgumentError);
    x = {};
    x.lr = 0.0;
    CHECK_THROWS_AS(x.validate(), ArgumentError);

    const auto base = baseline_config();
    CHECK(base.optimizer == OptimizerKind::sgd);
    CHECK(base.alpha == 0.0);
    CHECK_FALSE(base.hessian_aware());
    CHECK(hat_config().hessian_aware());
    CHECK(scheduled_lr(base, 0) == 0.1);
    CHECK(scheduled_lr(base, 10) == Approx(0.025));
    CHECK(scheduled_lr(base, 25) == Approx(0.1 * 0.25 * 0.25));
}

TEST_CASE("alpha = 0 with gating off reduces to the baseline step bit for bit", "[trainer][reduction]") {
    const Architecture arch(zoo::tinynet());
    const auto m = build(zoo::tinynet(), 3);
    for (auto opt : {OptimizerKind::sgd, OptimizerKind::rmsprop}) {
        TrainConfig cfg;
        cfg.optimizer = opt;
        cfg.momentum = opt == OptimizerKind::sgd ? 0.8 : 0.0;
        cfg.lr = 0.05;
        cfg.alpha = 0.0;
        cfg.gating = Gating::always;
        for (bool curvature : {false, true}) {
            cfg.log_trace = curvature;  // also run the probe path, which must not perturb the update
            auto params = m.to_double();
            std::vector<double> ref = params;
            TrainState<double> st;
            OptimizerState<double> ref_st;
            for (std::uint64_t k = 0; k < 3; ++k) {
                const Batch b = testing::random_batch(arch, 8, 100 + k);
                const auto log = hat_step<double>(arch, params, b.view(), cfg, st, cfg.lr);
                ref = baseline_step(arch, ref, b.view(), cfg, ref_st, cfg.lr);
                CHECK_FALSE(log.regularized);
                CHECK(same_bits(params, ref));
                if (curvature) CHECK(std::isfinite(log.trace));
            }
        }
    }
}

TEST_CASE("a skipped gate leaves the baseline update", "[trainer][gate]") {
    const Architecture arch(zoo::tinynet());
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::sgd;
    cfg.lr = 0.1;
    cfg.alpha = 1.0;
    cfg.probes = 4;
    auto params = build(zoo::tinynet(), 5).to_double();
    const auto start = params;
    TrainState<double> st;
    st.gate.tau = 1e30;
    const Batch b = testing::random_batch(arch, 8, 6);
    const auto log = hat_step<double>(arch, params, b.view(), cfg, st, cfg.lr);
    CHECK_FALSE(log.regularized);
    CHECK(st.gate.tau == log.median);
    OptimizerState<double> ref_st;
    CHECK(same_bits(params, baseline_step(arch, start, b.view(), cfg, ref_st, cfg.lr)));
}

TEST_CASE("one regularised step lowers the probe quadratic form", "[trainer][oracle]") {
    const Architecture arch(zoo::tinynet());
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::sgd;
    cfg.lr = 1e-3;
    cfg.alpha = 1.0;
    cfg.probes = 8;
    cfg.gating = Gating::always;
    std::size_t lowered = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        cfg.seed = seed;
        const auto start = build(zoo::tinynet(), seed).to_double();
        const Batch b = testing::random_batch(arch, 16, 10 + seed);
        auto hat = start;
        TrainState<double> st;
        REQUIRE(hat_step<double>(arch, hat, b.view(), cfg, st, cfg.lr).regularized);
        OptimizerState<double> ref_st;
        const auto base = baseline_step(arch, start, b.view(), cfg, ref_st, cfg.lr);

        const auto probes = step_probes(cfg, 0, start.size(), {});
        auto mean_q = [&](const std::vector<double>& p) {
            CurvatureTape<double> ct(loss_builder<double>(arch, b.view()), p);
            double s = 0.0;
            for (const auto& v : probes) s += ct.quadratic(v);
            return s / static_cast<double>(probes.size());
        };
        lowered += mean_q(hat) < mean_q(base);
    }
    CHECK(lowered == 5);
}

TEST_CASE("recorded trace is the mean of the probe quadratics", "[trainer]") {
    const Architecture arch(zoo::tinynet());
    TrainConfig cfg;
    cfg.alpha = 1.0;
    cfg.probes = 6;
    cfg.trace_probes = 2;
    auto params = build(zoo::tinynet(), 2).to_double();
    const auto start = params;
    const Batch b = testing::random_batch(arch, 8, 3);
    TrainState<double> st;
    const auto log = hat_step<double>(arch, params, b.view(), cfg, st, cfg.lr);
    CurvatureTape<double> ct(loss_builder<double>(arch, b.view()), start);
    double s = 0.0;
    for (const auto& v : step_probes(cfg, 0, start.size(), {})) s += ct.quadratic(v);
    CHECK(log.trace == Approx(s / 6.0).epsilon(1e-12));
}

TEST_CASE("last-layer mask leaves other layers on the baseline update", "[trainer][mask]") {
    const Architecture arch(zoo::tinynet());
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::sgd;
    cfg.lr = 0.05;
    cfg.alpha = 1.0;
    cfg.probes = 5;
    cfg.gating = Gating::always;
    cfg.hessian_layers = last_layers(arch, 1);
    const auto start = build(zoo::tinynet(), 8).to_double();
    const Batch b = testing::random_batch(arch, 12, 9);
    auto hat = start;
    TrainState<double> st;
    REQUIRE(hat_step<double>(arch, hat, b.view(), cfg, st, cfg.lr).regularized);
    OptimizerState<double> ref_st;
    const auto base = baseline_step(arch, start, b.view(), cfg, ref_st, cfg.lr);
    const std::size_t first = arch.layer(2).param_offset;
    std::size_t moved = 0;
    for (std::size_t i = 0; i < start.size(); ++i) {
        if (i < first) CHECK(std::bit_cast<std::uint64_t>(hat[i]) == std::bit_cast<std::uint64_t>(base[i]));
        else moved += hat[i] != base[i];
    }
    CHECK(moved > 0);
}

TEST_CASE("training log satisfies gate soundness", "[trainer][gate]") {
    const auto d = testing::blobs_for(zoo::tinynet(), 300, 2);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.probes = 4;
    cfg.batch_size = 32;
    const auto r = train(zoo::tinynet(), d.train, cfg, &d.test);
    std::size_t reg = 0, skip = 0;
    double tau = 0.0;
    for (const auto& s : r.steps) {
        REQUIRE(s.finite);
        CHECK(s.tau == tau);
        if (s.regularized) {
            ++reg;
            CHECK(s.median > s.tau);
        } else {
            ++skip;
            CHECK(s.median <= s.tau);
            tau = s.median;
        }
    }
    CHECK(reg > 0);
    CHECK(skip > 0);
    CHECK(r.epochs.size() == 3);
    for (const auto& e : r.epochs) {
        CHECK(e.wall_ms >= 0.0);
        CHECK(std::isfinite(e.trace));
    }
}

TEST_CASE("training is deterministic per seed", "[trainer]") {
    const auto d = testing::blobs_for(zoo::tinynet(), 200, 3);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.probes = 3;
    const auto a = train(zoo::tinynet(), d.train, cfg);
    const auto b = train(zoo::tinynet(), d.train, cfg);
    CHECK(a.model == b.model);
    cfg.seed = 2;
    CHECK_FALSE(train(zoo::tinynet(), d.train, cfg).model == a.model);
}

TEST_CASE("divergence and non-finite steps", "[trainer]") {
    const auto d = testing::blobs_for(zoo::tinynet(), 200, 3);
    TrainConfig cfg = baseline_config();
    cfg.epochs = 3;
    cfg.lr = 1e30;
    CHECK_THROWS_AS(train(zoo::tinynet(), d.train, cfg), NumericError);
    CHECK_THROWS_AS(train(zoo::tinynet(), Dataset{}, baseline_config()), ArgumentError);

    auto m = build(zoo::tinynet(), 1);
    m[0] = std::numeric_limits<float>::infinity();
    const ParamStore before = m;
    TrainState<float> st;
    const auto log = hat_step<float>(m.arch(), m.values(), d.train.rows(0, 16), hat_config(), st, 1e-3);
    CHECK_FALSE(log.finite);
    CHECK(m == before);
}

TEST_CASE("HAT keeps accuracy close to baseline on separable blobs", "[trainer]") {
    const auto d = testing::blobs_for(zoo::tinynet(), 600, 5, 0.6);
    TrainConfig base = baseline_config();
    base.epochs = 8;
    TrainConfig hat = base;
    hat.alpha = 0.01;
    hat.probes = 4;
    const auto rb = train(zoo::tinynet(), d.train, base, &d.test);
    const auto rh = train(zoo::tinynet(), d.train, hat, &d.test);
    CHECK(std::fabs(rb.epochs.back().test_accuracy - rh.epochs.back().test_accuracy) <= 0.015);
}
