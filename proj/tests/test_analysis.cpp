#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace hat;
using Catch::Approx;

namespace {

FlipRecord record(float old_value, int bit, double r) {
    FlipRecord x;
    x.bit = bit;
    x.old_bits = std::bit_cast<std::uint32_t>(old_value);
    x.new_bits = flip_bit(x.old_bits, bit);
    x.rad = r;
    return x;
}

} // namespace

TEST_CASE("landscape centre, transposition and restoration", "[analysis][landscape]") {
    const auto m = build(zoo::tinynet(), 3);
    const Batch b = testing::random_batch(m.arch(), 20, 4);
    const auto before = serialize(m);
    const auto g = landscape(m, 2, b.view(), 1.0, 7, 11, 12);
    CHECK(serialize(m) == before);
    CHECK(g.coordinate(g.center()) == 0.0);
    CHECK(g.at(g.center(), g.center()) == loss_xe<float>(infer(m, b.view()), b.labels, 3));
    CHECK(g.coordinate(0) == -1.0);
    CHECK(g.coordinate(6) == 1.0);

    const auto swapped = landscape(m, 2, b.view(), 1.0, 7, 12, 11);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 7; ++j) CHECK(swapped.at(i, j) == g.at(j, i));

    const auto par = landscape(m, 2, b.view(), 1.0, 7, 11, 12, 3);
    CHECK(par.loss == g.loss);

    CHECK_THROWS_AS(landscape(m, 1, b.view()), ArgumentError);
    CHECK_THROWS_AS(landscape(m, 2, b.view(), 1.0, 4), ArgumentError);
    CHECK_THROWS_AS(landscape(m, 2, b.view(), 0.0, 5), ArgumentError);

    const auto csv = parse_csv(landscape_csv(g));
    CHECK(csv.rows.size() == 49);
}

TEST_CASE("landscape curvature matches the directional Hessian", "[analysis][landscape][oracle]") {
    const auto m = build(zoo::tinynet(), 5);
    const Batch b = testing::random_batch(m.arch(), 30, 6);
    const std::size_t layer = 2;
    const auto g = landscape(m, layer, b.view(), 0.05, 5, 1, 2);
    const auto& info = m.arch().layer(layer);
    const auto d1 = unit_direction(info.param_count(), 1), d2 = unit_direction(info.param_count(), 2);
    auto embed = [&](const std::vector<double>& d) {
        std::vector<double> v(m.size(), 0.0);
        for (std::size_t k = 0; k < d.size(); ++k) v[info.param_offset + k] = d[k];
        return v;
    };
    const auto params = m.to_double();
    CurvatureTape<double> ct(loss_builder<double>(m.arch(), b.view()), params);
    const double expect = ct.quadratic(embed(d1)) + ct.quadratic(embed(d2));
    CHECK(center_curvature(g, 1) == Approx(expect).epsilon(0.05));
}

TEST_CASE("unit directions", "[analysis]") {
    const auto d = unit_direction(40, 9);
    double n = 0.0;
    for (double x : d) n += x * x;
    CHECK(n == Approx(1.0).epsilon(1e-12));
    CHECK(unit_direction(40, 9) == d);
    CHECK(unit_direction(40, 10) != d);
}

TEST_CASE("perturbation thresholds", "[analysis]") {
    const std::vector<FlipRecord> recs{record(0.5f, kSignBit, 0.5), record(0.25f, 0, 0.9), record(1.0f, 30, 0.8),
                                       record(0.3f, 30, 0.05)};
    const auto s = perturb_threshold(recs);
    REQUIRE(s.deltas.size() == 3);
    CHECK(s.infinite == 1);
    CHECK(s.min == std::nextafter(0.25f, 1.0f) - 0.25f);
    CHECK(s.deltas[1] == 1.0);
    CHECK(std::isinf(s.deltas[2]));
    CHECK(s.median == 1.0);
    CHECK(std::isnan(perturb_threshold({}).min));
}

TEST_CASE("bit position histogram", "[analysis]") {
    const std::vector<FlipRecord> one{record(0.1f, 30, 0.9)};
    const auto h = bit_position_hist(one);
    CHECK(h.at(30) == 1);
    CHECK(h.total() == 1);
    CHECK(h.msb_share() == 1.0);

    std::vector<FlipRecord> recs = one;
    recs.push_back(record(0.1f, 3, 0.2));
    recs.push_back(record(0.1f, 31, 0.3));
    recs.push_back(record(0.1f, 29, 0.01));  // not erratic
    const auto g = bit_position_hist(recs);
    CHECK(g.total() == 3);
    CHECK(g.mantissa == 1);
    CHECK(g.at(31) == 1);
    CHECK(g.at(29) == 0);
    CHECK(g.msb_share() == Approx(1.0 / 3.0));
    const auto csv = parse_csv(bit_position_csv(g));
    CHECK(csv.rows.size() == 10);
    CHECK(csv.rows[7][1] == "31");
    CHECK(csv.rows[7][3] == "1");
}

TEST_CASE("pruning", "[analysis][prune]") {
    auto m = build({{Dense{1, 2}}, {1}, 2}, 1);
    REQUIRE(m.size() == 4);
    const std::vector<float> v{0.1f, -0.2f, 0.3f, -0.4f};
    std::copy(v.begin(), v.end(), m.values().begin());
    const auto half = prune(m, 0.5);
    CHECK(half.zeroed == 2);
    CHECK(half.model.to_double() == std::vector<double>{0.0, 0.0, 0.3f, -0.4f});
    CHECK(prune(m, 0.0).model == m);
    CHECK(nonzero_count(prune(m, 1.0).model) == 0);
    CHECK_THROWS_AS(prune(m, 1.5), ArgumentError);

    const auto big = build(zoo::basenet({1, 8, 8}, 4), 2);
    const auto d = testing::blobs_for(zoo::basenet({1, 8, 8}, 4), 120, 3);
    const std::vector<double> s{0.0, 0.1, 0.3, 0.5, 0.9};
    const auto curve = prune_sweep(big, s, d.test.view());
    CHECK(curve.front().nonzero == nonzero_count(big));
    CHECK(curve.front().accuracy == accuracy(big, d.test.view()));
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].nonzero <= curve[i - 1].nonzero);
    CHECK(curve.back().nonzero == big.size() - static_cast<std::size_t>(std::floor(0.9 * big.size())));

    const std::vector<PrunePoint> pts{{0.0, 10, 0.9}, {0.5, 5, 0.85}, {0.7, 3, 0.5}, {0.9, 1, 0.88}};
    CHECK(retained_sparsity(pts, 0.9) == 0.5);
    CHECK(parse_csv(prune_csv(pts)).rows.size() == 4);
}

TEST_CASE("quantization", "[analysis][quant]") {
    auto m = build({{Dense{2, 1}}, {2}, 1}, 1);
    m[0] = 1.0f;
    m[1] = 0.5f;
    m[2] = 0.3f;  // bias
    const auto q8 = quantize(m, {});
    CHECK(q8.model[0] == 1.0f);
    CHECK(q8.model[1] == static_cast<float>(64.0 / 127.0));
    CHECK(q8.model[2] == 0.3f);
    CHECK(q8.layers[0].scale == Approx(1.0 / 127.0));

    QuantConfig two;
    two.bits = 2;
    m[1] = 0.4f;
    const auto q2 = quantize(m, two);
    CHECK(q2.model[1] == 0.0f);
    m[1] = -0.6f;
    CHECK(quantize(m, two).model[1] == -1.0f);

    const auto net = build(zoo::basenet({1, 8, 8}, 4), 3);
    for (int bits : {2, 4, 8}) {
        QuantConfig c;
        c.bits = bits;
        const auto q = quantize(net, c);
        for (const auto& l : q.layers) CHECK(l.max_error <= l.scale / 2 * (1 + 1e-6));
        const auto again = quantize(q.model, c);
        CHECK(serialize(again.model) == serialize(q.model));
    }

    QuantConfig mixed;
    mixed.mode = QuantMode::mixed;
    const auto qm = quantize(net, mixed);
    for (const auto& l : qm.layers)
        CHECK(l.bits == (net.arch().layer(l.layer).kind == LayerKind::conv2d ? 4 : 2));

    auto zero = net;
    const auto& first = zero.arch().layer(zero.arch().param_layers().front());
    for (std::size_t i = 0; i < first.weight_count; ++i) zero[first.param_offset + i] = 0.0f;
    const auto qz = quantize(zero, {});
    CHECK(qz.layers.front().scale == 0.0);
    for (std::size_t i = 0; i < first.weight_count; ++i) CHECK(qz.model[first.param_offset + i] == 0.0f);

    QuantConfig bad;
    bad.bits = 3;
    CHECK_THROWS_AS(quantize(net, bad), ArgumentError);
    CHECK(parse_csv(quant_csv(qm)).rows.size() == qm.layers.size());
}
