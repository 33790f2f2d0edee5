#pragma once

#include <cstdint>
#include <functional>

namespace calseg {

// Thread cap for compute kernels: min(CALSEG_THREADS, hardware concurrency),
// at least 1. Read once per process.
int kernel_threads();

// Runs fn(begin, end) over disjoint contiguous chunks of [0, n). Each chunk is
// written by exactly one worker and every per-element reduction keeps its
// serial order, so results are identical for any thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace calseg
