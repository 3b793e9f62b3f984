#pragma once

#include <malloc.h>

namespace idmorph {

// Training and evaluation allocate and free multi-megabyte scratch buffers
// every step. glibc serves those with mmap/munmap by default, and the page
// faults cost ~25% of runtime; keep them on the heap instead.
inline void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
}

}  // namespace idmorph
