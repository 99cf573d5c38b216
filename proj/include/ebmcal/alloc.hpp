#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ebmcal {

// Keeps glibc from returning per-op tensor buffers to the OS on every step.
// Call once at the top of main. Has no effect on results.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

}  // namespace ebmcal
