#pragma once

#include <cstdint>
#include <functional>

namespace noforge {

// Worker cap for internal parallel loops. Reads NOFORGE_THREADS once; values
// below 1 or an unset variable fall back to the hardware concurrency.
int thread_count();

// Chunked parallel map over [0, n). fn must be safe to call concurrently for
// distinct indices; results must be written to disjoint slots so the overall
// output is independent of scheduling.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

} // namespace noforge
