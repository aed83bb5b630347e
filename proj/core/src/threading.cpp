#include "clicktok/threading.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace clicktok {

static std::atomic<int> g_threads{1};

void set_thread_count(int n) {
    g_threads.store(n < 1 ? 1 : n);
}

int thread_count() {
    return g_threads.load();
}

void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t)> & fn) {
    int64_t n = end - begin;
    if (n <= 0) return;
    int workers = thread_count();
    if (workers <= 1 || n == 1) {
        for (int64_t i = begin; i < end; ++i) fn(i);
        return;
    }
    if ((int64_t) workers > n) workers = (int) n;

    std::exception_ptr err;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        int64_t lo = begin + w * chunk;
        int64_t hi = lo + chunk < end ? lo + chunk : end;
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
            try {
                for (int64_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto & t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

} // namespace clicktok
