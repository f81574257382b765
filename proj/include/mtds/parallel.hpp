#pragma once

#include <cstddef>
#include <functional>

namespace mtds {

// Worker count from MTDS_WORKERS, falling back to hardware concurrency.
int worker_count();

// Runs body(i) for i in [0, n). Each index is handled by exactly one worker
// with a fixed contiguous partition, so results written per index do not
// depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                  int workers = 0);

}  // namespace mtds
