#include "xlab/runtime.hpp"

#include <malloc.h>

namespace xlab {

void configure_allocator() {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
}

}  // namespace xlab
