#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <stdexcept>
#include <thread>
#include <vector>

namespace wsf {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Each index is an
/// independent task; results must be written into index-addressed slots by
/// the caller's closure, so the outcome is identical for any job count.
/// The first exception (by index order) is rethrown after all workers join.
inline void parallel_for_indexed(int n, int jobs, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    if (jobs < 1) jobs = 1;
    const int workers = std::min(jobs, n);
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            while (true) {
                int i = next.fetch_add(1, std::memory_order_relaxed);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    errors[size_t(i)] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace wsf
