//! Allocator tuning for the large, short-lived buffers of a training step.

use std::sync::Once;

/// Makes glibc serve tensor-sized blocks from the heap and keep freed
/// memory, so every step reuses the previous step's pages instead of
/// mapping and zero-faulting fresh ones. A no-op on other platforms.
pub fn retain_heap_memory() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}
