#pragma once

// Minimal slice-parallelism helper. Work is split into independent output
// slices; each slice is computed entirely by one worker in a fixed order, so
// results are bitwise identical for any worker count.

#include <cstddef>
#include <thread>
#include <vector>

namespace gecko {

inline int& worker_count() {
    static int n = 1;
    return n;
}

template <typename Fn>
void parallel_for(size_t begin, size_t end, Fn&& fn, int workers = 0) {
    if (workers <= 0) workers = worker_count();
    const size_t n = end > begin ? end - begin : 0;
    if (n == 0) return;
    if (workers <= 1 || n == 1) {
        for (size_t i = begin; i < end; ++i) fn(i);
        return;
    }
    size_t nw = std::min<size_t>(static_cast<size_t>(workers), n);
    std::vector<std::thread> pool;
    pool.reserve(nw);
    for (size_t w = 0; w < nw; ++w) {
        pool.emplace_back([=, &fn]() {
            for (size_t i = begin + w; i < end; i += nw) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace gecko
