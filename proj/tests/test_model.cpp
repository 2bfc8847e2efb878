#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace hat;
using Catch::Approx;

TEST_CASE("build is deterministic and counts parameters", "[model]") {
    const auto a = build(zoo::basenet({1, 8, 8}, 4), 5);
    const auto b = build(zoo::basenet({1, 8, 8}, 4), 5);
    CHECK(a == b);
    CHECK_FALSE(a == build(zoo::basenet({1, 8, 8}, 4), 6));

    const ModelSpec dense{{Dense{784, 10}}, {784}, 10};
    CHECK(Architecture(dense).param_count() == 7850);
    CHECK(Architecture(zoo::basenet({1, 8, 8}, 4)).param_count() == 772);
    // conv 4*9+4, conv 8*16+8, dense 1152*16+16, dense 16*10+10
    CHECK(Architecture(zoo::basenet({1, 28, 28}, 10)).param_count() == 18794);
    CHECK(Architecture(zoo::tinynet()).param_count() == 51);
    CHECK(Architecture(zoo::micronet()).param_count() == 12);
}

TEST_CASE("init stays within the fan-in bound", "[model]") {
    const auto m = build(zoo::lenet({1, 8, 8}, 4), 3);
    for (std::size_t li : m.arch().param_layers()) {
        const auto& info = m.arch().layer(li);
        const double bound = std::sqrt(1.0 / static_cast<double>(info.weight_count / info.bias_count));
        for (std::size_t i = 0; i < info.param_count(); ++i) CHECK(std::fabs(m[info.param_offset + i]) <= bound);
    }
}

TEST_CASE("incompatible shapes are rejected", "[model]") {
    CHECK_THROWS_AS(Architecture({{Dense{3, 2}}, {4}, 2}), ShapeError);
    CHECK_THROWS_AS(Architecture({{Dense{4, 3}}, {4}, 2}), ShapeError);
    CHECK_THROWS_AS(Architecture({{Conv2d{1, 2, 5}, Flatten{}, Dense{2, 2}}, {1, 3, 3}, 2}), ShapeError);
    CHECK_THROWS_AS(Architecture({{MaxPool{2}, Flatten{}}, {4}, 4}), ShapeError);
    CHECK_THROWS_AS(Architecture({{Dense{4, 2}}, {4}, 0}), ShapeError);
}

TEST_CASE("forward basics", "[model]") {
    auto m = build(zoo::tinynet(), 1);
    const Batch b = testing::random_batch(m.arch(), 5, 2);
    const auto logits = infer(m, b.view());
    CHECK(logits.size() == 5 * 3);

    ParamStore z = m;
    for (auto& v : z.values()) v = 0.0f;
    for (float v : infer(z, b.view())) CHECK(v == 0.0f);

    for (std::size_t i = 0; i < b.size(); ++i) {
        Batch one;
        one.inputs.assign(b.inputs.begin() + static_cast<std::ptrdiff_t>(4 * i),
                          b.inputs.begin() + static_cast<std::ptrdiff_t>(4 * (i + 1)));
        one.labels = {b.labels[i]};
        const auto row = infer(m, one.view());
        for (std::size_t c = 0; c < 3; ++c) CHECK(std::bit_cast<std::uint32_t>(row[c]) ==
                                                  std::bit_cast<std::uint32_t>(logits[3 * i + c]));
    }
    CHECK(infer(m, b.view()) == logits);

    Batch bad = b;
    bad.inputs.pop_back();
    CHECK_THROWS_AS(infer(m, bad.view()), ShapeError);
    Batch badlabel = b;
    badlabel.labels[0] = 3;
    CHECK_THROWS_AS(infer(m, badlabel.view()), ShapeError);
}

TEST_CASE("taped and plain forward agree bit for bit", "[model]") {
    const auto m = build(zoo::basenet({1, 8, 8}, 4), 2);
    const Batch b = testing::random_batch(m.arch(), 7, 3);
    ad::Tape<float> t(m.size());
    const auto fwd = forward<float>(t, m.arch(), m.values(), b.view());
    CHECK(t.value(fwd.logits) == infer(m, b.view()));
}

TEST_CASE("loss and accuracy", "[model]") {
    const std::vector<std::uint32_t> labels{0, 1, 2, 3};
    CHECK(loss_xe<float>(std::vector<float>(20, 0.0f), std::vector<std::uint32_t>{0, 1, 2, 3}, 5) ==
          Approx(std::log(5.0)).epsilon(1e-6));

    std::vector<float> confident(4 * 4, 0.0f);
    for (std::size_t i = 0; i < 4; ++i) confident[4 * i + labels[i]] = 100.0f;
    CHECK(accuracy<float>(confident, labels, 4) == 1.0);
    CHECK(loss_xe<float>(confident, labels, 4) < 1e-30);

    std::vector<float> huge(4 * 4);
    SplitMix64 rng(1);
    for (auto& v : huge) v = static_cast<float>(rng.uniform(-1e4, 1e4));
    CHECK(std::isfinite(loss_xe<float>(huge, labels, 4)));

    confident[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK(accuracy<float>(confident, labels, 4) == 0.75);
    confident[4] = std::numeric_limits<float>::infinity();
    CHECK(accuracy<float>(confident, labels, 4) == 0.5);
}

TEST_CASE("param_locate is a bijection over contiguous layer ranges", "[model]") {
    const auto m = build(zoo::basenet({1, 8, 8}, 4), 1);
    const auto& pl = m.arch().param_layers();
    const auto first = m.locate(0);
    CHECK(first == ParamLocation{pl.front(), 0, 0});
    const auto last = m.locate(m.size() - 1);
    CHECK(last.layer == pl.back());
    CHECK(last.offset == m.arch().layer(pl.back()).param_count() - 1);
    for (std::size_t id = 0; id < m.size(); ++id) {
        const auto loc = m.locate(id);
        CHECK(loc.byte_offset == 4 * id);
        CHECK(m.flat_id(loc.layer, loc.offset) == id);
    }
    CHECK_THROWS_AS(m.locate(m.size()), ArgumentError);
    CHECK_THROWS_AS(m.flat_id(pl.front(), m.arch().layer(pl.front()).param_count()), ArgumentError);

    std::size_t expect = 0;
    for (std::size_t li : pl) {
        CHECK(m.arch().layer(li).param_offset == expect);
        expect += m.arch().layer(li).param_count();
    }
    CHECK(expect == m.size());
}

TEST_CASE("parameter count survives flips and round trips", "[model]") {
    auto m = build(zoo::lenet({1, 8, 8}, 4), 1);
    const auto d = m.size();
    m.set_bits(3, m.bits(3) ^ (1u << 30));
    CHECK(m.size() == d);
    CHECK(deserialize(serialize(m)).size() == d);
}
