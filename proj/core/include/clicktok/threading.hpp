#pragma once

#include <cstdint>
#include <functional>

namespace clicktok {

// Process-wide worker count. 1 (the default) runs everything inline and is
// the bit-determinism guarantee; parallel callers must keep per-item work
// independent so any count gives the same result.
void set_thread_count(int n);
int thread_count();

// Runs fn(i) for i in [begin, end). Items are distributed in fixed
// contiguous chunks so outputs written per-index never race.
void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t)> & fn);

} // namespace clicktok
