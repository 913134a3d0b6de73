#pragma once

#include <cstddef>
#include <functional>

namespace spikecalib {

// Worker count for batch-parallel kernels. Defaults to 1, or SPIKECALIB_THREADS when set.
int thread_count();
void set_thread_count(int threads);

// Calls fn(i) for i in [0, n). Work is split into contiguous ranges; each index is
// processed by exactly one worker, so per-index results do not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace spikecalib
