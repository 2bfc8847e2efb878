#pragma once

// Datasets, the IDX reader, the HATM model binary, and small CSV helpers.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "hatrain/error.hpp"
#include "hatrain/hash.hpp"
#include "hatrain/model.hpp"
#include "hatrain/rng.hpp"

namespace hat {

enum class Split : std::uint8_t { train, test, all };

struct Dataset {
    std::vector<float> inputs;  // row-major, one sample per row
    std::vector<std::uint32_t> labels;
    std::vector<std::size_t> sample_shape;
    std::size_t classes = 0;
    Split split = Split::all;
    std::string provenance;

    std::size_t size() const { return labels.size(); }
    std::size_t features() const { return product(sample_shape); }

    BatchView view() const { return {inputs, labels}; }

    /// Contiguous rows [first, first + count).
    BatchView rows(std::size_t first, std::size_t count) const {
        count = std::min(count, size() - std::min(first, size()));
        return {std::span<const float>(inputs).subspan(first * features(), count * features()),
                std::span<const std::uint32_t>(labels).subspan(first, count)};
    }

    Batch gather(std::span<const std::size_t> ids) const {
        Batch b;
        const std::size_t f = features();
        b.inputs.reserve(ids.size() * f);
        b.labels.reserve(ids.size());
        for (auto i : ids) {
            b.inputs.insert(b.inputs.end(), inputs.begin() + static_cast<std::ptrdiff_t>(i * f),
                            inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * f));
            b.labels.push_back(labels[i]);
        }
        return b;
    }
};

struct DataSplit {
    Dataset train, test;
};

struct BlobConfig {
    std::size_t n = 4000;
    std::size_t dims = 64;
    std::size_t classes = 4;
    double spread = 1.25;
    std::uint64_t seed = 1;
    double test_fraction = 0.25;
};

/// Gaussian class clusters: centres ~ N(0, I), samples ~ N(centre, spread^2 I).
/// Samples alternate classes; each class is split train/test in the same ratio.
inline DataSplit synth_blobs(const BlobConfig& cfg) {
    if (cfg.classes < 2) throw ArgumentError("synth_blobs: need at least two classes");
    if (cfg.dims == 0 || cfg.n < cfg.classes) throw ArgumentError("synth_blobs: empty dataset");
    SplitMix64 rng(cfg.seed);
    std::vector<double> centres(cfg.classes * cfg.dims);
    for (auto& c : centres) c = rng.normal();

    std::vector<std::vector<std::size_t>> by_class(cfg.classes);
    std::vector<float> all(cfg.n * cfg.dims);
    std::vector<std::uint32_t> labels(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        const std::size_t y = i % cfg.classes;
        labels[i] = static_cast<std::uint32_t>(y);
        by_class[y].push_back(i);
        for (std::size_t j = 0; j < cfg.dims; ++j)
            all[i * cfg.dims + j] = static_cast<float>(centres[y * cfg.dims + j] + cfg.spread * rng.normal());
    }

    std::vector<std::size_t> train_ids, test_ids;
    for (const auto& ids : by_class) {
        const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(ids.size())));
        train_ids.insert(train_ids.end(), ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(n_test));
        test_ids.insert(test_ids.end(), ids.end() - static_cast<std::ptrdiff_t>(n_test), ids.end());
    }
    shuffle<std::size_t>(train_ids, rng);
    shuffle<std::size_t>(test_ids, rng);

    Dataset full;
    full.inputs = std::move(all);
    full.labels = std::move(labels);
    full.sample_shape = {cfg.dims};
    full.classes = cfg.classes;
    char prov[160];
    std::snprintf(prov, sizeof prov, "synthetic(seed=%llu,n=%zu,dims=%zu,classes=%zu,spread=%g)",
                  static_cast<unsigned long long>(cfg.seed), cfg.n, cfg.dims, cfg.classes, cfg.spread);
    full.provenance = prov;

    auto take = [&](const std::vector<std::size_t>& ids, Split s) {
        Batch b = full.gather(ids);
        Dataset d;
        d.inputs = std::move(b.inputs);
        d.labels = std::move(b.labels);
        d.sample_shape = full.sample_shape;
        d.classes = full.classes;
        d.split = s;
        d.provenance = full.provenance;
        return d;
    };
    return {take(train_ids, Split::train), take(test_ids, Split::test)};
}

/// Reinterprets the sample shape (e.g. 64 features as 1x8x8); the element count must match.
inline Dataset with_shape(Dataset d, std::vector<std::size_t> shape) {
    if (product(shape) != d.features()) throw ShapeError("with_shape: element count changes");
    d.sample_shape = std::move(shape);
    return d;
}

// ---- IDX --------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace detail {

inline std::uint32_t be32(std::span<const unsigned char> b, std::size_t at) {
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

/// Returns the dimension sizes after validating magic and exact payload length.
inline std::vector<std::size_t> idx_header(std::span<const unsigned char> b, std::uint32_t magic,
                                           const std::string& what) {
    if (b.size() < 4) throw FormatError(what + ": truncated header");
    const std::uint32_t m = be32(b, 0);
    if (m != magic) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%s: bad magic 0x%08x (expected 0x%08x)", what.c_str(), m, magic);
        throw FormatError(buf);
    }
    const std::size_t rank = magic & 0xff;
    if (b.size() < 4 + 4 * rank) throw FormatError(what + ": truncated header");
    std::vector<std::size_t> dims(rank);
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        dims[i] = be32(b, 4 + 4 * i);
        if (dims[i] == 0) throw FormatError(what + ": zero dimension");
        if (count > (std::size_t{1} << 40) / dims[i]) throw FormatError(what + ": dimensions too large");
        count *= dims[i];
    }
    const std::size_t payload = b.size() - 4 - 4 * rank;
    if (payload != count)
        throw FormatError(what + ": payload has " + std::to_string(payload) + " bytes, header implies " +
                          std::to_string(count));
    return dims;
}

} // namespace detail

/// Parses in-memory IDX image (ubyte, rank 3) and label (ubyte, rank 1) files.
inline Dataset idx_parse(std::span<const unsigned char> images, std::span<const unsigned char> labels) {
    const auto idims = detail::idx_header(images, kIdxImagesMagic, "idx images");
    const auto ldims = detail::idx_header(labels, kIdxLabelsMagic, "idx labels");
    if (idims[0] != ldims[0])
        throw FormatError("idx: " + std::to_string(idims[0]) + " images but " + std::to_string(ldims[0]) +
                          " labels");
    Dataset d;
    d.sample_shape = {idims[1], idims[2]};
    d.inputs.resize(idims[0] * idims[1] * idims[2]);
    for (std::size_t i = 0; i < d.inputs.size(); ++i) d.inputs[i] = static_cast<float>(images[16 + i]) / 255.0f;
    d.labels.resize(ldims[0]);
    std::uint32_t top = 0;
    for (std::size_t i = 0; i < d.labels.size(); ++i) {
        d.labels[i] = labels[8 + i];
        top = std::max(top, d.labels[i]);
    }
    d.classes = top + 1;
    d.provenance = "idx";
    return d;
}

inline Dataset idx_read(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto ib = read_file(images);
    const auto lb = read_file(labels);
    Dataset d = idx_parse(ib, lb);
    d.provenance = "idx(" + images.string() + "," + labels.string() + ")";
    return d;
}

// ---- HATM model binary --------------------------------------------------------
//
//   "HATM" | u16 version | u16 rank | u32 dims[rank] | u32 classes
//   | u32 layer count | per layer: u8 kind, u8 n, u32 ints[n]
//   | payload: d little-endian float32 values in flat order
// All integers little-endian.

inline constexpr std::uint16_t kModelVersion = 1;

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void raw(std::span<const std::byte> b) {
        for (auto x : b) out_.push_back(static_cast<unsigned char>(x));
    }
    void tag(const char* s) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(s[i]));
    }
    std::vector<unsigned char>& bytes() { return out_; }

private:
    std::vector<unsigned char> out_;
};

class ByteReader {
public:
    ByteReader(std::span<const unsigned char> b, std::string what) : b_(b), what_(std::move(what)) {}
    std::uint8_t u8() { return need(1), b_[at_++]; }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(b_[at_] | (b_[at_ + 1] << 8));
        at_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[at_ + i]} << (8 * i);
        at_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[at_ + i]} << (8 * i);
        at_ += 8;
        return v;
    }
    bool tag(const char* s) {
        need(4);
        const bool ok = std::equal(s, s + 4, b_.begin() + static_cast<std::ptrdiff_t>(at_));
        at_ += 4;
        return ok;
    }
    std::span<const unsigned char> take(std::size_t n) {
        need(n);
        auto s = b_.subspan(at_, n);
        at_ += n;
        return s;
    }
    std::size_t remaining() const { return b_.size() - at_; }

private:
    void need(std::size_t n) const {
        if (b_.size() - at_ < n) throw FormatError(what_ + ": truncated");
    }
    std::span<const unsigned char> b_;
    std::size_t at_ = 0;
    std::string what_;
};

} // namespace detail

inline std::vector<unsigned char> serialize(const ParamStore& m) {
    detail::ByteWriter w;
    const ModelSpec& spec = m.arch().spec();
    w.tag("HATM");
    w.u16(kModelVersion);
    w.u16(static_cast<std::uint16_t>(spec.input_shape.size()));
    for (auto v : spec.input_shape) w.u32(static_cast<std::uint32_t>(v));
    w.u32(static_cast<std::uint32_t>(spec.classes));
    w.u32(static_cast<std::uint32_t>(spec.layers.size()));
    for (const auto& layer : spec.layers) {
        w.u8(static_cast<std::uint8_t>(kind_of(layer)));
        std::vector<std::uint32_t> ints;
        std::visit(
            [&](const auto& l) {
                using L = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<L, Dense>) ints = {std::uint32_t(l.in), std::uint32_t(l.out)};
                else if constexpr (std::is_same_v<L, Conv2d>)
                    ints = {std::uint32_t(l.in_channels), std::uint32_t(l.out_channels), std::uint32_t(l.kernel)};
                else if constexpr (std::is_same_v<L, MaxPool>) ints = {std::uint32_t(l.k)};
            },
            layer);
        w.u8(static_cast<std::uint8_t>(ints.size()));
        for (auto v : ints) w.u32(v);
    }
    for (std::size_t i = 0; i < m.size(); ++i) w.u32(m.bits(i));
    return std::move(w.bytes());
}

inline ParamStore deserialize(std::span<const unsigned char> bytes) {
    detail::ByteReader r(bytes, "model file");
    if (!r.tag("HATM")) throw FormatError("model file: bad magic");
    const std::uint16_t version = r.u16();
    if (version != kModelVersion) throw FormatError("model file: unsupported version " + std::to_string(version));
    ModelSpec spec;
    const std::uint16_t rank = r.u16();
    if (rank == 0 || rank > 3) throw FormatError("model file: bad input rank");
    for (std::uint16_t i = 0; i < rank; ++i) spec.input_shape.push_back(r.u32());
    spec.classes = r.u32();
    const std::uint32_t count = r.u32();
    if (count > 4096) throw FormatError("model file: implausible layer count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint8_t kind = r.u8();
        const std::uint8_t n = r.u8();
        std::vector<std::uint32_t> ints(n);
        for (auto& v : ints) v = r.u32();
        auto want = [&](std::size_t k) {
            if (ints.size() != k) throw FormatError("model file: layer " + std::to_string(i) + " has bad shape ints");
        };
        switch (static_cast<LayerKind>(kind)) {
        case LayerKind::dense: want(2); spec.layers.emplace_back(Dense{ints[0], ints[1]}); break;
        case LayerKind::conv2d: want(3); spec.layers.emplace_back(Conv2d{ints[0], ints[1], ints[2]}); break;
        case LayerKind::relu: want(0); spec.layers.emplace_back(Relu{}); break;
        case LayerKind::maxpool: want(1); spec.layers.emplace_back(MaxPool{ints[0]}); break;
        case LayerKind::flatten: want(0); spec.layers.emplace_back(Flatten{}); break;
        default: throw FormatError("model file: unknown layer kind " + std::to_string(kind));
        }
    }
    std::shared_ptr<const Architecture> arch;
    try {
        arch = std::make_shared<const Architecture>(std::move(spec));
    } catch (const ShapeError& e) {
        throw FormatError(std::string("model file: inconsistent layer table: ") + e.what());
    }
    const std::size_t d = arch->param_count();
    if (r.remaining() != 4 * d)
        throw FormatError("model file: payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(4 * d));
    std::vector<float> data(d);
    for (auto& v : data) v = std::bit_cast<float>(r.u32());
    return ParamStore(std::move(arch), std::move(data));
}

inline void save(const ParamStore& m, const std::filesystem::path& path) { write_file(path, serialize(m)); }

inline ParamStore load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

// ---- CSV ----------------------------------------------------------------------

/// Shortest round-trip text for a float, "%.9g".
inline std::string fmt(float v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    return buf;
}

/// Round-trip text for a double, "%.17g".
inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class... Cells>
std::string csv_row(const Cells&... cells) {
    std::string out;
    bool first = true;
    auto put = [&](const auto& c) {
        if (!first) out += ',';
        first = false;
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, std::string>) out += c;
        else if constexpr (std::is_convertible_v<C, const char*>) out += c;
        else if constexpr (std::is_same_v<C, float> || std::is_same_v<C, double>) out += fmt(c);
        else out += std::to_string(c);
    };
    (put(cells), ...);
    return out + '\n';
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError("csv: missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline CsvTable parse_csv(const std::string& text) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (first) {
            t.header = std::move(cells);
            first = false;
        } else {
            if (cells.size() != t.header.size())
                throw FormatError("csv: row has " + std::to_string(cells.size()) + " cells, header has " +
                                  std::to_string(t.header.size()));
            t.rows.push_back(std::move(cells));
        }
    }
    if (first) throw FormatError("csv: no header row");
    return t;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return parse_csv(std::string(bytes.begin(), bytes.end()));
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

} // namespace hat
