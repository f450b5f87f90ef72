#pragma once

namespace dkf {

/// Raises glibc's mmap and trim thresholds. No-op outside glibc.
void tune_allocator();

}  // namespace dkf
