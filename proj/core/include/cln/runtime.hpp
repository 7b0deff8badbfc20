#pragma once

namespace cln {

// Raises the allocator's mmap and trim thresholds so that the large,
// short-lived buffers of each training step are recycled instead of being
// returned to the OS. Call once at program start; a no-op outside glibc.
void tune_allocator();

}  // namespace cln
