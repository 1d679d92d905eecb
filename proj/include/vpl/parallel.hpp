#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace vpl {

// Deterministic parallel-for. Work items are independent by contract
// (results land in preallocated per-index slots), so the only requirement
// for reproducibility is that any reduction over results happens in index
// order, which callers do after the loop returns.
//
// Thread count is process-global and set once by the CLI from --threads.
inline int& global_thread_count() {
    static int n = 1;
    return n;
}

inline void set_thread_count(int n) { global_thread_count() = n < 1 ? 1 : n; }

template <typename Fn>
void parallel_for(size_t count, Fn&& fn, int threads = 0) {
    if (threads <= 0) threads = global_thread_count();
    if (threads <= 1 || count <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    const size_t workers = std::min<size_t>(static_cast<size_t>(threads), count);
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= count) return;
                fn(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace vpl
