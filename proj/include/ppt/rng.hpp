#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

#include "ppt/common.hpp"

namespace ppt {

namespace detail {

inline uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

// Splittable deterministic generator (xoshiro256** core). A stream is fully
// determined by its 64-bit key; fork() derives a child key from the parent
// key and a label without consuming parent state, so sibling streams are
// independent of the order in which they are created or drawn from.
class Rng {
public:
    explicit Rng(uint64_t seed) { reset_key(seed ^ 0x5bf0363546e95d13ull); }

    Rng fork(std::string_view name) const {
        Rng child(*this);
        child.reset_key(key_ ^ fnv1a64(name));
        return child;
    }

    Rng fork(uint64_t index) const {
        Rng child(*this);
        uint64_t x = key_ ^ (0x9e3779b97f4a7c15ull * (index + 1));
        child.reset_key(detail::splitmix64(x));
        return child;
    }

    Rng fork(std::string_view name, uint64_t index) const { return fork(name).fork(index); }

    uint64_t key() const { return key_; }

    uint64_t next_u64() {
        const uint64_t result = detail::rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl(s_[3], 45);
        return result;
    }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) {
        check(lo <= hi, "uniform: lo > hi");
        return lo + (hi - lo) * uniform();
    }

    // unbiased integer in [0, n)
    uint64_t below(uint64_t n) {
        check(n > 0, "below: n must be positive");
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    double gaussian(double mean, double stddev) {
        check(stddev >= 0.0, "gaussian: stddev must be >= 0");
        // Box-Muller, no cached spare: every call consumes exactly two draws
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
        return mean + stddev * z;
    }

    int categorical(std::span<const double> probs) {
        check(!probs.empty(), "categorical: empty distribution");
        double total = 0.0;
        for (double p : probs) {
            check(p >= 0.0, "categorical: negative probability");
            total += p;
        }
        check(std::abs(total - 1.0) <= 1e-9, "categorical: probabilities must sum to 1");
        double r = uniform();
        double cum = 0.0;
        int last_positive = 0;
        for (size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] > 0.0) last_positive = static_cast<int>(i);
            cum += probs[i];
            if (r < cum) return static_cast<int>(i);
        }
        return last_positive;
    }

    // uniform density over the (k-1)-simplex
    std::vector<double> dirichlet_uniform(int k) {
        check(k >= 1, "dirichlet_uniform: k must be >= 1");
        if (k == 1) return {1.0};
        std::vector<double> w(k);
        double total = 0.0;
        for (int i = 0; i < k; ++i) {
            w[i] = -std::log1p(-uniform());
            total += w[i];
        }
        for (double& v : w) v /= total;
        return w;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    void reset_key(uint64_t key) {
        key_ = key;
        uint64_t x = key;
        for (auto& s : s_) s = detail::splitmix64(x);
        if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
    }

    uint64_t key_ = 0;
    uint64_t s_[4] = {};
};

}  // namespace ppt
