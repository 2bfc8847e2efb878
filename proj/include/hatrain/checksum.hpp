#pragma once

// Group checksums over parameter bytes with golden copies for exact repair.
//
// The covered ids (every parameter, or an erratic subset) are cut into
// consecutive groups of G. Each group keeps a 64-bit signature of its
// little-endian 32-bit words. Golden bytes serialize to their own file so they can be
// kept in storage the attacker cannot reach.
//
// Sidecar: "HATC" | u16 version | u8 coverage | u32 G | u32 d | u32 covered
//          | u32 groups | covered ids (u32, erratic coverage only)
//          | per group: u32 first, u32 count, u64 signature
// Golden:  "HATG" | u16 version | u32 covered | u64 fnv of payload
//          | covered * 4 bytes
// All integers little-endian.

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "hatrain/data.hpp"
#include "hatrain/error.hpp"
#include "hatrain/hash.hpp"
#include "hatrain/model.hpp"

namespace hat {

enum class Coverage : std::uint8_t { all = 0, erratic = 1 };

inline const char* coverage_name(Coverage c) { return c == Coverage::all ? "all" : "erratic"; }

struct ChecksumGroup {
    std::uint32_t first = 0;  // index into the covered id list
    std::uint32_t count = 0;
    std::uint64_t signature = 0;

    friend bool operator==(const ChecksumGroup&, const ChecksumGroup&) = default;
};

struct ChecksumTable {
    std::size_t group_size = 0;
    Coverage coverage = Coverage::all;
    std::size_t param_count = 0;
    std::vector<std::uint32_t> covered;  // ascending parameter ids
    std::vector<ChecksumGroup> groups;
    std::vector<std::uint32_t> golden;   // bit patterns, parallel to `covered`

    bool contiguous() const { return coverage == Coverage::all; }

    /// Signature bytes plus golden copy bytes.
    std::size_t space_bytes() const { return groups.size() * 8 + golden.size() * 4; }

    bool covers(std::size_t id) const { return std::binary_search(covered.begin(), covered.end(), id); }

    /// Group holding parameter `id`, or groups.size() when not covered.
    std::size_t group_of(std::size_t id) const {
        auto it = std::lower_bound(covered.begin(), covered.end(), id);
        if (it == covered.end() || *it != id) return groups.size();
        return static_cast<std::size_t>(it - covered.begin()) / group_size;
    }

    friend bool operator==(const ChecksumTable&, const ChecksumTable&) = default;
};

namespace detail {

// Four independent multiply-xor lanes over the 32-bit words, folded with a
// 64-bit finalizer. Each step is a bijection of the lane state, so a change
// confined to one word always changes the signature.
struct WordHash {
    static constexpr std::uint64_t kMul = 0x9e3779b97f4a7c15ULL;
    std::uint64_t lane[4] = {0x243f6a8885a308d3ULL, 0x13198a2e03707344ULL, 0xa4093822299f31d0ULL,
                             0x082efa98ec4e6c89ULL};
    std::uint64_t n = 0;

    void add(std::uint32_t w) {
        auto& h = lane[n & 3];
        h = (h ^ w) * kMul;
        ++n;
    }

    std::uint64_t digest() const {
        auto rotl = [](std::uint64_t v, int r) { return (v << r) | (v >> (64 - r)); };
        std::uint64_t h = lane[0] ^ rotl(lane[1], 16) ^ rotl(lane[2], 32) ^ rotl(lane[3], 48) ^ n;
        h ^= h >> 33;
        h *= 0xff51afd7ed558ccdULL;
        h ^= h >> 33;
        h *= 0xc4ceb9fe1a85ec53ULL;
        h ^= h >> 33;
        return h;
    }
};

inline std::uint32_t word_of(float v) {
    std::uint32_t w;
    std::memcpy(&w, &v, sizeof w);
    return w;
}

inline std::uint64_t group_signature(std::span<const float> params, const ChecksumTable& t, const ChecksumGroup& g) {
    WordHash h;
    if (t.contiguous()) {
        for (float v : params.subspan(t.covered[g.first], g.count)) h.add(word_of(v));
    } else {
        for (std::uint32_t i = g.first; i < g.first + g.count; ++i) h.add(word_of(params[t.covered[i]]));
    }
    return h.digest();
}

} // namespace detail

/// Builds signatures and golden copies. `ids` is required for erratic coverage
/// and ignored otherwise.
inline ChecksumTable build_checksums(const ParamStore& m, std::size_t group_size, Coverage coverage = Coverage::all,
                                     std::span<const std::size_t> ids = {}) {
    if (group_size < 1) throw ArgumentError("checksum: group size must be >= 1");
    ChecksumTable t;
    t.group_size = group_size;
    t.coverage = coverage;
    t.param_count = m.size();
    if (coverage == Coverage::all) {
        t.covered.resize(m.size());
        std::iota(t.covered.begin(), t.covered.end(), 0u);
    } else {
        for (std::size_t id : ids) {
            if (id >= m.size()) throw ArgumentError("checksum: covered id " + std::to_string(id) + " out of range");
            t.covered.push_back(static_cast<std::uint32_t>(id));
        }
        std::sort(t.covered.begin(), t.covered.end());
        t.covered.erase(std::unique(t.covered.begin(), t.covered.end()), t.covered.end());
    }
    for (std::size_t first = 0; first < t.covered.size(); first += group_size) {
        ChecksumGroup g;
        g.first = static_cast<std::uint32_t>(first);
        g.count = static_cast<std::uint32_t>(std::min(group_size, t.covered.size() - first));
        t.groups.push_back(g);
    }
    for (auto& g : t.groups) g.signature = detail::group_signature(m.values(), t, g);
    t.golden.reserve(t.covered.size());
    for (std::uint32_t id : t.covered) t.golden.push_back(m.bits(id));
    return t;
}

inline void check_lineage(const ParamStore& m, const ChecksumTable& t) {
    if (m.size() != t.param_count)
        throw ArgumentError("checksum: table built for " + std::to_string(t.param_count) + " parameters, model has " +
                            std::to_string(m.size()));
}

/// Ids of groups whose current bytes no longer match their signature.
inline std::vector<std::size_t> detect(const ParamStore& m, const ChecksumTable& t, unsigned workers = 1) {
    check_lineage(m, t);
    std::vector<char> bad(t.groups.size(), 0);
    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(t.groups.size(), 1))));
    auto scan = [&](unsigned w) {
        for (std::size_t g = w; g < t.groups.size(); g += workers)
            bad[g] = detail::group_signature(m.values(), t, t.groups[g]) != t.groups[g].signature;
    };
    if (workers == 1) {
        scan(0);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(scan, w);
    }
    std::vector<std::size_t> out;
    for (std::size_t g = 0; g < bad.size(); ++g)
        if (bad[g]) out.push_back(g);
    return out;
}

/// Copies golden bytes back for the listed groups. Returns parameters rewritten.
inline std::size_t recover(ParamStore& m, const ChecksumTable& t, std::span<const std::size_t> group_ids) {
    check_lineage(m, t);
    std::size_t n = 0;
    for (std::size_t g : group_ids) {
        if (g >= t.groups.size()) throw ArgumentError("recover: group " + std::to_string(g) + " out of range");
        const auto& grp = t.groups[g];
        for (std::uint32_t i = grp.first; i < grp.first + grp.count; ++i) {
            m.set_bits(t.covered[i], t.golden[i]);
            ++n;
        }
    }
    return n;
}

// ---- storage ---------------------------------------------------------------------

inline constexpr std::uint16_t kChecksumVersion = 1;

inline std::vector<unsigned char> serialize_sidecar(const ChecksumTable& t) {
    detail::ByteWriter w;
    w.tag("HATC");
    w.u16(kChecksumVersion);
    w.u8(static_cast<std::uint8_t>(t.coverage));
    w.u32(static_cast<std::uint32_t>(t.group_size));
    w.u32(static_cast<std::uint32_t>(t.param_count));
    w.u32(static_cast<std::uint32_t>(t.covered.size()));
    w.u32(static_cast<std::uint32_t>(t.groups.size()));
    if (!t.contiguous())
        for (auto id : t.covered) w.u32(id);
    for (const auto& g : t.groups) {
        w.u32(g.first);
        w.u32(g.count);
        w.u64(g.signature);
    }
    return std::move(w.bytes());
}

inline std::vector<unsigned char> serialize_golden(const ChecksumTable& t) {
    detail::ByteWriter w;
    w.tag("HATG");
    w.u16(kChecksumVersion);
    w.u32(static_cast<std::uint32_t>(t.golden.size()));
    w.u64(fnv1a64(std::as_bytes(std::span<const std::uint32_t>(t.golden))));
    for (auto v : t.golden) w.u32(v);
    return std::move(w.bytes());
}

/// Rebuilds a table from its two files, validating structure and the golden digest.
inline ChecksumTable deserialize_checksums(std::span<const unsigned char> sidecar, std::span<const unsigned char> golden) {
    ChecksumTable t;
    detail::ByteReader r(sidecar, "checksum sidecar");
    if (!r.tag("HATC")) throw FormatError("checksum sidecar: bad magic");
    if (r.u16() != kChecksumVersion) throw FormatError("checksum sidecar: unsupported version");
    const auto cov = r.u8();
    if (cov > 1) throw FormatError("checksum sidecar: unknown coverage");
    t.coverage = static_cast<Coverage>(cov);
    t.group_size = r.u32();
    t.param_count = r.u32();
    const std::size_t covered = r.u32(), groups = r.u32();
    if (t.group_size == 0) throw FormatError("checksum sidecar: zero group size");
    if (groups != (covered + t.group_size - 1) / t.group_size) throw FormatError("checksum sidecar: group count mismatch");
    if (t.contiguous()) {
        if (covered != t.param_count) throw FormatError("checksum sidecar: full coverage must cover every parameter");
        t.covered.resize(covered);
        std::iota(t.covered.begin(), t.covered.end(), 0u);
    } else {
        for (std::size_t i = 0; i < covered; ++i) {
            t.covered.push_back(r.u32());
            if (t.covered.back() >= t.param_count || (i && t.covered[i] <= t.covered[i - 1]))
                throw FormatError("checksum sidecar: covered ids must be ascending and in range");
        }
    }
    for (std::size_t g = 0; g < groups; ++g) {
        ChecksumGroup grp;
        grp.first = r.u32();
        grp.count = r.u32();
        grp.signature = r.u64();
        if (grp.first != g * t.group_size || grp.count != std::min(t.group_size, covered - grp.first))
            throw FormatError("checksum sidecar: group " + std::to_string(g) + " has wrong bounds");
        t.groups.push_back(grp);
    }
    if (r.remaining()) throw FormatError("checksum sidecar: trailing bytes");

    detail::ByteReader gr(golden, "golden store");
    if (!gr.tag("HATG")) throw FormatError("golden store: bad magic");
    if (gr.u16() != kChecksumVersion) throw FormatError("golden store: unsupported version");
    if (gr.u32() != covered) throw FormatError("golden store: count does not match sidecar");
    const auto digest = gr.u64();
    if (gr.remaining() != covered * 4) throw FormatError("golden store: payload length mismatch");
    for (std::size_t i = 0; i < covered; ++i) t.golden.push_back(gr.u32());
    if (fnv1a64(std::as_bytes(std::span<const std::uint32_t>(t.golden))) != digest)
        throw FormatError("golden store: digest mismatch");
    for (const auto& g : t.groups) {
        detail::WordHash h;
        for (std::uint32_t i = g.first; i < g.first + g.count; ++i) h.add(t.golden[i]);
        if (h.digest() != g.signature) throw FormatError("golden store: does not match sidecar signatures");
    }
    return t;
}

inline void save_checksums(const ChecksumTable& t, const std::filesystem::path& sidecar,
                           const std::filesystem::path& golden) {
    write_file(sidecar, serialize_sidecar(t));
    write_file(golden, serialize_golden(t));
}

inline ChecksumTable load_checksums(const std::filesystem::path& sidecar, const std::filesystem::path& golden) {
    return deserialize_checksums(read_file(sidecar), read_file(golden));
}

// ---- overhead --------------------------------------------------------------------

/// Fastest wall time of one detect() pass, in milliseconds. Each sample loops
/// until at least `min_ms` has elapsed so tiny models still time reliably.
inline double scan_ms(const ParamStore& m, const ChecksumTable& t, std::size_t samples = 7, double min_ms = 20.0) {
    using clock = std::chrono::steady_clock;
    std::vector<double> per;
    std::size_t sink = 0;
    for (std::size_t s = 0; s < samples; ++s) {
        std::size_t reps = 0;
        const auto t0 = clock::now();
        double el = 0.0;
        do {
            sink += detect(m, t).size();
            ++reps;
            el = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        } while (el < min_ms);
        per.push_back(el / static_cast<double>(reps));
    }
    if (sink == static_cast<std::size_t>(-1)) per.push_back(0);  // keep the loop observable
    return *std::min_element(per.begin(), per.end());
}

struct OverheadRow {
    std::size_t group_size = 0;
    std::size_t space_bytes = 0;
    double scan_ms = 0.0;
    double recovered_accuracy = 0.0;
};

inline std::string overhead_csv(std::span<const OverheadRow> rows) {
    std::string out = "G,space_bytes,scan_ms,recovered_accuracy\n";
    for (const auto& r : rows) out += csv_row(r.group_size, r.space_bytes, r.scan_ms, r.recovered_accuracy);
    return out;
}

} // namespace hat
