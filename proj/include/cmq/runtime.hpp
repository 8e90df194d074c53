#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cmq {

/// Keeps large tensor buffers on the heap instead of returning them to the
/// OS after every training step. Without this each step pays for fresh page
/// faults on several megabytes of activations.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace cmq
