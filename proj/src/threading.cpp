#include "svsplat/threading.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace svsplat {

namespace {
std::atomic<int> g_threads{0};

int resolve_threads() {
    const int req = g_threads.load(std::memory_order_relaxed);
    if (req > 0) return req;
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::clamp(hw, 1u, 8u));
}
} // namespace

void set_num_threads(int n) { g_threads.store(n < 0 ? 0 : n, std::memory_order_relaxed); }

int num_threads() { return resolve_threads(); }

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    const int workers = std::min<int64_t>(resolve_threads(), n);
    if (workers <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int t = 0; t < workers; ++t)
        pool.emplace_back([&] {
            for (;;) {
                const int64_t i = next.fetch_add(1, std::memory_order_relaxed);
                if (i >= n) return;
                fn(i);
            }
        });
    for (auto& th : pool) th.join();
}

void parallel_for_chunks(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    const int workers = static_cast<int>(std::min<int64_t>(resolve_threads(), n));
    if (workers <= 1) {
        if (n > 0) fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    const int64_t chunk = (n + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
        const int64_t b = t * chunk;
        const int64_t e = std::min<int64_t>(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

} // namespace svsplat
