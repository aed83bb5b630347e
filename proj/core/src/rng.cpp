#include "clicktok/rng.hpp"

#include "clicktok/errors.hpp"

#include <algorithm>
#include <cmath>

namespace clicktok {

uint64_t mix_u64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t master, std::string_view stream) {
    // FNV-1a over the label, then mixed with the master seed
    uint64_t h = 0xCBF29CE484222325ull;
    for (char c : stream) {
        h ^= (uint8_t) c;
        h *= 0x100000001B3ull;
    }
    return mix_u64(master ^ mix_u64(h));
}

uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b, uint64_t c) {
    uint64_t h = mix_u64(master);
    h = mix_u64(h ^ mix_u64(a + 0x1ull));
    h = mix_u64(h ^ mix_u64(b + 0x2ull));
    h = mix_u64(h ^ mix_u64(c + 0x3ull));
    return h;
}

uint64_t derive_seed(uint64_t master, std::string_view stream, uint64_t a, uint64_t b) {
    return derive_seed(derive_seed(master, stream), a, b);
}

double rng::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_normal_;
    }
    // Box-Muller on (0,1] uniforms
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_normal_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
}

int64_t rng::uniform_int(int64_t n) {
    if (n <= 0) {
        throw numeric_error("rng::uniform_int: n must be positive");
    }
    // rejection sampling to avoid modulo bias
    uint64_t un = (uint64_t) n;
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return (int64_t) (x % un);
}

std::vector<int64_t> rng::sample_without_replacement(int64_t n, int64_t k) {
    if (k > n) {
        throw numeric_error("sample_without_replacement: k > n");
    }
    // partial Fisher-Yates over an index vector
    std::vector<int64_t> idx(n);
    for (int64_t i = 0; i < n; ++i) idx[i] = i;
    for (int64_t i = 0; i < k; ++i) {
        int64_t j = i + uniform_int(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace clicktok
