#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace tdinf {

// Runs f(0..n-1) on up to n_threads workers and returns results in index
// order, so parallel evaluation stays deterministic. Jobs must not share
// mutable state.
template <typename T>
std::vector<T> parallel_map(int n, int n_threads, const std::function<T(int)>& f) {
    std::vector<T> results(static_cast<std::size_t>(n));
    if (n == 0) return results;
    n_threads = std::max(1, std::min(n_threads, n));
    if (n_threads == 1) {
        for (int i = 0; i < n; ++i) results[static_cast<std::size_t>(i)] = f(i);
        return results;
    }
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex err_mu;
    std::vector<std::thread> workers;
    for (int t = 0; t < n_threads; ++t) {
        workers.emplace_back([&] {
            while (true) {
                int i = next.fetch_add(1);
                if (i >= n || failed.load()) return;
                try {
                    results[static_cast<std::size_t>(i)] = f(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!first_error) first_error = std::current_exception();
                    failed.store(true);
                    return;
                }
            }
        });
    }
    for (auto& w : workers) w.join();
    if (first_error) std::rethrow_exception(first_error);
    return results;
}

inline int default_threads() {
    unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

}  // namespace tdinf
