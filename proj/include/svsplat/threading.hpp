#pragma once

#include <cstdint>
#include <functional>

namespace svsplat {

/// Global worker count for parallel sections. 0 restores the automatic
/// default. Every parallel section in the library is written so its
/// results are bitwise identical for any worker count.
void set_num_threads(int n);
int num_threads();

/// Run fn(i) for i in [0, n). Work items must write disjoint outputs;
/// scheduling carries no reduction order.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

/// Chunked variant: fn(begin, end) over a partition of [0, n).
void parallel_for_chunks(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

} // namespace svsplat
