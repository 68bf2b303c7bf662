#pragma once

#include <cstddef>
#include <functional>

namespace apnea {

/// Worker cap: APNEA_PIPELINE_THREADS when set to a positive integer,
/// otherwise the hardware concurrency (at least 1).
std::size_t worker_count();

/// Runs fn(0..n-1) on up to `workers` threads. Every index runs even if some
/// throw; the exception of the lowest failing index is rethrown afterwards.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t workers = worker_count());

} // namespace apnea
