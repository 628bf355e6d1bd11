#pragma once

#include <cstddef>
#include <functional>

namespace cocosplat {

/// Worker count: COCOSPLAT_THREADS when set, otherwise hardware concurrency.
int worker_count();

/// Overrides the worker count for the rest of the process (0 restores the default).
void set_worker_count(int n);

/// Runs fn(chunk) for chunk in [0, chunks). The chunking is fixed by the caller, so callers that
/// reduce per-chunk partials in chunk order get results independent of the thread count.
void parallel_chunks(std::size_t chunks, const std::function<void(std::size_t)>& fn);

}  // namespace cocosplat
