#pragma once

#include <cstddef>
#include <functional>

namespace dfe {

/// Process-wide cap on worker threads used by compute kernels. Defaults to
/// the available hardware parallelism. Results never depend on this value.
void set_thread_budget(int threads);
int thread_budget();

/// Runs fn(begin, end) over a static contiguous partition of [0, count).
/// Partition boundaries only affect scheduling, never arithmetic order
/// within an element.
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn);

} // namespace dfe
