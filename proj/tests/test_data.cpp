#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "support.hpp"

using namespace hat;

namespace {

std::vector<unsigned char> be(std::initializer_list<std::uint32_t> words) {
    std::vector<unsigned char> out;
    for (auto w : words)
        for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(w >> s));
    return out;
}

// Two 3x3 images with pixels 0..17 and labels {1, 0}.
std::vector<unsigned char> images_fixture() {
    auto b = be({0x00000803, 2, 3, 3});
    for (unsigned char i = 0; i < 18; ++i) b.push_back(i);
    return b;
}

std::vector<unsigned char> labels_fixture() {
    auto b = be({0x00000801, 2});
    b.push_back(1);
    b.push_back(0);
    return b;
}

std::filesystem::path scratch_dir() {
    auto p = std::filesystem::temp_directory_path() / "hatrain_test_data";
    std::filesystem::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("synth_blobs is deterministic and stratified", "[data]") {
    BlobConfig c;
    c.n = 400;
    const auto a = synth_blobs(c), b = synth_blobs(c);
    CHECK(a.train.inputs == b.train.inputs);
    CHECK(a.test.labels == b.test.labels);
    CHECK(a.train.size() == 300);
    CHECK(a.test.size() == 100);
    std::vector<std::size_t> per(4, 0);
    for (auto y : a.test.labels) ++per[y];
    for (auto n : per) CHECK(n == 25);
    c.seed = 2;
    CHECK(synth_blobs(c).train.inputs != a.train.inputs);
    c.classes = 1;
    CHECK_THROWS_AS(synth_blobs(c), ArgumentError);
}

TEST_CASE("synth_blobs uses a fixed generator", "[data]") {
    // First values pinned so any change to the PRNG or sampling order shows up.
    SplitMix64 rng(1);
    CHECK(rng() == 0x910a2dec89025cc1ULL);
    BlobConfig c;
    c.n = 8;
    c.dims = 2;
    c.classes = 2;
    const auto d = synth_blobs(c);
    const auto again = synth_blobs(c);
    CHECK(std::memcmp(d.train.inputs.data(), again.train.inputs.data(), d.train.inputs.size() * 4) == 0);
}

TEST_CASE("a linear model separates blobs in the small-spread limit", "[data]") {
    BlobConfig c;
    c.n = 800;
    c.dims = 16;
    c.spread = 1e-3;
    const auto d = synth_blobs(c);
    TrainConfig t = baseline_config();
    t.epochs = 5;
    const auto r = train({{Dense{16, 4}}, {16}, 4}, d.train, t, &d.test);
    CHECK(r.epochs.back().test_accuracy == 1.0);
}

TEST_CASE("with_shape keeps the element count", "[data]") {
    BlobConfig c;
    c.n = 40;
    auto d = synth_blobs(c).train;
    CHECK(with_shape(d, {1, 8, 8}).features() == 64);
    CHECK_THROWS_AS(with_shape(d, {1, 8, 7}), ShapeError);
}

TEST_CASE("idx: crafted fixture parses", "[data][idx]") {
    const auto d = idx_parse(images_fixture(), labels_fixture());
    CHECK(d.size() == 2);
    CHECK(d.sample_shape == std::vector<std::size_t>{3, 3});
    CHECK(d.labels == std::vector<std::uint32_t>{1, 0});
    CHECK(d.inputs[0] == 0.0f);
    CHECK(d.inputs[17] == 17.0f / 255.0f);

    const auto dir = scratch_dir();
    write_file(dir / "img", images_fixture());
    write_file(dir / "lbl", labels_fixture());
    CHECK(idx_read(dir / "img", dir / "lbl").inputs == d.inputs);
    CHECK_THROWS_AS(idx_read(dir / "missing", dir / "lbl"), Error);
}

TEST_CASE("idx: error paths", "[data][idx]") {
    const auto img = images_fixture(), lbl = labels_fixture();
    CHECK_THROWS_AS(idx_parse(img, img), FormatError);  // images passed as labels
    auto short_lbl = be({0x00000801, 1});
    short_lbl.push_back(0);
    CHECK_THROWS_AS(idx_parse(img, short_lbl), FormatError);
    auto truncated = img;
    truncated.pop_back();
    CHECK_THROWS_AS(idx_parse(truncated, lbl), FormatError);
    CHECK_THROWS_AS(idx_parse({}, lbl), FormatError);
}

TEST_CASE("idx: every mutated header is rejected", "[data][idx][fuzz]") {
    const auto img = images_fixture(), lbl = labels_fixture();
    std::size_t mutations = 0;
    SplitMix64 rng(99);
    auto expect_reject = [&](const std::vector<unsigned char>& i, const std::vector<unsigned char>& l) {
        ++mutations;
        CHECK_THROWS_AS(idx_parse(i, l), FormatError);
    };
    for (std::size_t byte = 0; byte < 16; ++byte) {
        for (int x : {0x01, 0x80, 0xff, static_cast<int>(1 + rng.below(254))}) {
            auto m = img;
            m[byte] ^= static_cast<unsigned char>(x);
            expect_reject(m, lbl);
        }
    }
    for (std::size_t byte = 0; byte < 8; ++byte) {
        for (int x : {0x01, 0x80, 0xff, static_cast<int>(1 + rng.below(254))}) {
            auto m = lbl;
            m[byte] ^= static_cast<unsigned char>(x);
            expect_reject(img, m);
        }
    }
    for (std::size_t len = 0; len < img.size(); ++len)
        expect_reject(std::vector<unsigned char>(img.begin(), img.begin() + static_cast<std::ptrdiff_t>(len)), lbl);
    for (std::size_t len = 0; len < lbl.size(); ++len)
        expect_reject(img, std::vector<unsigned char>(lbl.begin(), lbl.begin() + static_cast<std::ptrdiff_t>(len)));
    CHECK(mutations >= 100);
}

TEST_CASE("model binary round-trips byte for byte", "[data][hatm]") {
    for (const auto& spec : {zoo::tinynet(), zoo::micronet(), zoo::basenet({1, 8, 8}, 4), zoo::lenet({1, 8, 8}, 4),
                             zoo::basenet({1, 28, 28}, 10)}) {
        auto m = build(spec, 3);
        m.set_bits(0, 0x7fc00001u);  // NaN payloads survive too
        const auto bytes = serialize(m);
        const auto back = deserialize(bytes);
        CHECK(back == m);
        CHECK(serialize(back) == bytes);
        CHECK(back.arch().param_count() == m.arch().param_count());
    }
}

TEST_CASE("model binary: error paths", "[data][hatm]") {
    const auto m = build(zoo::tinynet(), 1);
    auto bytes = serialize(m);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(deserialize(bad_version), FormatError);
    auto truncated = bytes;
    truncated.resize(truncated.size() - 4);
    CHECK_THROWS_AS(deserialize(truncated), FormatError);
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(deserialize(extra), FormatError);
    CHECK_THROWS_AS(deserialize(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 10)), FormatError);
    CHECK_THROWS_AS(load(scratch_dir() / "does-not-exist.hatm"), Error);
}

TEST_CASE("a payload byte flipped on disk loads and is detected", "[data][hatm]") {
    const auto m = build(zoo::tinynet(), 4);
    const auto table = build_checksums(m, 8);
    const auto path = scratch_dir() / "flip.hatm";
    save(m, path);
    auto bytes = read_file(path);
    const std::size_t payload = bytes.size() - 4 * m.size();
    bytes[payload + 4 * 20 + 2] ^= 0x10;
    write_file(path, bytes);
    const auto hit = load(path);
    CHECK(detect(hit, table) == std::vector<std::size_t>{20 / 8});
}

TEST_CASE("csv helpers", "[data][csv]") {
    CHECK(csv_row(std::string("a"), 1, 0.5, 0.25f) == "a,1,0.5,0.25\n");
    CHECK(fmt(0.1) == "0.10000000000000001");
    const auto t = parse_csv("x,y\r\n1,2\n\n3,4\n");
    CHECK(t.header == std::vector<std::string>{"x", "y"});
    CHECK(t.rows.size() == 2);
    CHECK(t.column("y") == 1);
    CHECK_THROWS_AS(t.column("z"), FormatError);
    CHECK_THROWS_AS(parse_csv("x,y\n1\n"), FormatError);
    CHECK_THROWS_AS(parse_csv(""), FormatError);
    CHECK(parse_csv("a,b\n1,\n").rows[0][1].empty());
}
