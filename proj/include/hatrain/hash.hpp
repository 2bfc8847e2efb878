#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>

namespace hat {

/// 64-bit FNV-1a. Not cryptographic; any single-byte change alters the result
/// because every step is a bijection of the running state.
class Fnv1a64 {
public:
    static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
    static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

    void update(std::span<const std::byte> bytes) noexcept {
        for (std::byte b : bytes) {
            h_ ^= static_cast<std::uint64_t>(b);
            h_ *= kPrime;
        }
    }
    std::uint64_t digest() const noexcept { return h_; }

private:
    std::uint64_t h_ = kOffset;
};

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes) noexcept {
    Fnv1a64 h;
    h.update(bytes);
    return h.digest();
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string hex32(std::uint32_t v) {
    char buf[11];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

} // namespace hat
