#pragma once

#include <bit>
#include <cstdint>
#include <string_view>

namespace tvlab {

// 64-bit FNV-1a, fed little-endian words so digests are stable across runs.
class Fnv1a {
public:
    void byte(std::uint8_t b) {
        hash_ ^= b;
        hash_ *= 1099511628211ULL;
    }
    void word(std::uint64_t w) {
        for (int i = 0; i < 8; ++i) byte(static_cast<std::uint8_t>(w >> (8 * i)));
    }
    void integer(long long v) { word(static_cast<std::uint64_t>(v)); }
    void real(double v) { word(std::bit_cast<std::uint64_t>(v)); }
    void text(std::string_view s) {
        word(s.size());
        for (char c : s) byte(static_cast<std::uint8_t>(c));
    }
    std::uint64_t value() const { return hash_; }

private:
    std::uint64_t hash_ = 14695981039346656037ULL;
};

}  // namespace tvlab
