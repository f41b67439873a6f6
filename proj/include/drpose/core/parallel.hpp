#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace drpose {

/// Worker count: DRPOSE_THREADS env var, else hardware concurrency.
inline int thread_count() {
    static int n = [] {
        if (const char* env = std::getenv("DRPOSE_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return int(hc ? hc : 1);
    }();
    return n;
}

/// Static-partition parallel loop over [0, n). Each index is processed by
/// exactly one worker, so results are bit-identical for any worker count.
template <typename Fn>
inline void parallel_for(size_t n, size_t grain, Fn&& fn) {
    int nt = thread_count();
    if (nt <= 1 || n <= grain) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt)
    for (long long i = 0; i < (long long)n; ++i) fn(size_t(i));
#else
    for (size_t i = 0; i < n; ++i) fn(i);
#endif
}

} // namespace drpose
