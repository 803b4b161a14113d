#pragma once
// Deterministic fork-join over contiguous index chunks. Chunk boundaries
// depend only on (n, n_chunks), never on thread timing, so per-chunk results
// can be reduced in chunk order for bit-reproducible accumulation.

#include <functional>
#include <thread>
#include <vector>

namespace pivoflow {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

// fn(begin, end, chunk_index) over [0, n) split into up to n_chunks chunks.
inline void parallel_chunks(int n, int n_chunks,
                            const std::function<void(int, int, int)>& fn) {
    if (n <= 0) return;
    if (n_chunks > n) n_chunks = n;
    if (n_chunks <= 1) {
        fn(0, n, 0);
        return;
    }
    const int base = n / n_chunks;
    const int extra = n % n_chunks;
    std::vector<std::thread> workers;
    workers.reserve(n_chunks);
    int begin = 0;
    for (int c = 0; c < n_chunks; ++c) {
        const int size = base + (c < extra ? 1 : 0);
        const int end = begin + size;
        workers.emplace_back(fn, begin, end, c);
        begin = end;
    }
    for (auto& w : workers) w.join();
}

}  // namespace pivoflow
