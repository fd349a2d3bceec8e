#include "noforge/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace noforge {

int thread_count() {
    static const int cached = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw < 1) hw = 1;
        if (const char* env = std::getenv("NOFORGE_THREADS")) {
            const int requested = std::atoi(env);
            if (requested >= 1) return std::min(requested, hw);
        }
        return hw;
    }();
    return cached;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    const int workers = std::min<std::int64_t>(thread_count(), n);
    if (workers <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next(0);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const std::int64_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    }
    for (auto& th : pool) th.join();
}

} // namespace noforge
