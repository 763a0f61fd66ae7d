#pragma once

#include <cstddef>
#include <functional>

namespace mfbslq {

// Number of worker threads: MFBSLQ_THREADS if set and positive, otherwise
// the hardware concurrency.
unsigned thread_count();

// Runs body(i) for i in [begin, end). Iterations must be independent; each
// index is processed exactly once, so results do not depend on scheduling.
void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& body,
                  std::size_t min_chunk = 4096);

}  // namespace mfbslq
