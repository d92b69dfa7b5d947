#pragma once

#include <cstddef>
#include <functional>

namespace bags {

/// Sets the worker count used by parallel_for. 0 selects the hardware concurrency.
void set_thread_count(int count);
int thread_count();

/// Calls `body(begin, end)` over [0, n) in chunks of `grain` items. Chunks are
/// claimed dynamically, so `body` must only write state owned by its index range.
void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& body);

} // namespace bags
