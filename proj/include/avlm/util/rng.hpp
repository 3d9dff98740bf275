#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace avlm {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_str64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives an independent stream seed from a root seed and a named purpose.
/// All randomness in a run flows from one root seed through these substreams,
/// so per-sample generation is order-independent and reproducible.
inline uint64_t substream_seed(uint64_t root, std::string_view stage,
                               std::string_view purpose = "", uint64_t index = 0) {
    uint64_t h = splitmix64(root ^ 0x5851f42d4c957f2dULL);
    h = splitmix64(h ^ hash_str64(stage));
    h = splitmix64(h ^ hash_str64(purpose));
    h = splitmix64(h ^ index);
    return h;
}

/// Deterministic random stream. Distribution code is written out explicitly
/// (no std::*_distribution) so draws are bit-stable across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi). Modulo bias is negligible for our ranges.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi <= lo) throw std::invalid_argument("uniform_int: empty range");
        return lo + static_cast<int64_t>(gen_() % static_cast<uint64_t>(hi - lo));
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (uncached; two uniforms per draw).
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    /// Index drawn from an (unnormalized) weight vector.
    size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (total <= 0.0) throw std::invalid_argument("categorical: nonpositive total weight");
        double u = uniform() * total;
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return i;
        }
        return weights.size() - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices from [0, n), in increasing order.
    std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
        if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        for (size_t i = 0; i < k; ++i) {
            size_t j = i + static_cast<size_t>(uniform_int(0, static_cast<int64_t>(n - i)));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        return idx;
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace avlm
