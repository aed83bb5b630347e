#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace clicktok {

// Mixes a master seed with a stream label so every consumer of randomness
// gets an independent, reproducible stream. Distribution transforms are
// hand-rolled on top of the raw engine output so results do not depend on
// the standard library's (implementation-defined) distribution code.

uint64_t mix_u64(uint64_t x);
uint64_t derive_seed(uint64_t master, std::string_view stream);
uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b = 0, uint64_t c = 0);
uint64_t derive_seed(uint64_t master, std::string_view stream, uint64_t a, uint64_t b = 0);

class rng {
  public:
    explicit rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0,1) with 53 bits of precision
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; second value cached
    double normal();

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n);

    template <typename T> void shuffle(std::vector<T> & v) {
        for (int64_t i = (int64_t) v.size() - 1; i > 0; --i) {
            std::swap(v[i], v[uniform_int(i + 1)]);
        }
    }

    // k distinct values from [0, n), ascending
    std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k);

  private:
    std::mt19937_64 engine_;
    double cached_normal_ = 0.0;
    bool has_cached_ = false;
};

} // namespace clicktok
