#pragma once

#include <cstddef>
#include <functional>

namespace ssod {

/// Worker cap: SSOD_MATCH_THREADS if set to a positive integer, else hardware concurrency.
unsigned worker_count();

/// Runs fn(i) for i in [0, n) across up to worker_count() threads. Each index
/// must write only to its own output slot; results are then order-independent.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ssod
