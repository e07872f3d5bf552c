#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

namespace ppt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

struct check_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw check_error(msg);
}

template <class... Args>
std::string cat(Args&&... args) {
    std::string out;
    (void)std::initializer_list<int>{(out += [](auto&& a) {
        using A = std::decay_t<decltype(a)>;
        if constexpr (std::is_arithmetic_v<A>) return std::to_string(a);
        else return std::string(a);
    }(std::forward<Args>(args)), 0)...};
    return out;
}

// FNV-1a, used for config hashes and rng stream derivation.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* d = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = d[v & 0xf];
        v >>= 4;
    }
    return out;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + e^x) without overflow on either tail
inline double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace ppt
