#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace qdpd {

// Worker cap for parallel_for. 0 picks hardware concurrency.
inline std::atomic<int>& thread_cap() {
    static std::atomic<int> cap{0};
    return cap;
}

inline void set_thread_count(int n) { thread_cap().store(n); }

inline int thread_count() {
    int n = thread_cap().load();
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    return std::max(1, n);
}

// Static contiguous partition of [0, n). Each index is processed exactly once
// by exactly one worker, so results are bit-identical for any thread count as
// long as the body writes only to its own indices.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    int workers = static_cast<int>(std::min<int64_t>(thread_count(), n));
    if (workers <= 1) {
        body(0, n);
        return;
    }
    int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers - 1));
    for (int w = 1; w < workers; ++w) {
        int64_t lo = w * chunk;
        int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(0, std::min<int64_t>(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace qdpd
