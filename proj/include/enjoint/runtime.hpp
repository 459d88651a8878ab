#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace enjoint {

/// Keeps large activation buffers on the heap instead of fresh mmap pages, so
/// repeated training steps stop paying for page faults and zeroing.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace enjoint
