#pragma once

#include <cstdint>
#include <functional>

namespace qvpr {

// Worker count resolution: explicit argument > QVPR_THREADS env > 1.
int resolve_threads(int requested);

// Runs fn(begin, end) over disjoint contiguous chunks of [0, n). With
// threads <= 1 the call runs inline; results are identical either way as
// long as fn writes only to its own range.
void parallel_for(int64_t n, int threads, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace qvpr
