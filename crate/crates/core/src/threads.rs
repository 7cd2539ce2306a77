//! Worker pool sizing.

use std::sync::Once;

static INIT: Once = Once::new();

/// Cap the global worker pool from `SPIKEMOE_THREADS`. No-op when the
/// variable is unset or invalid, or when a pool already exists. Row-level
/// kernels produce bit-identical results for any worker count.
pub fn init_from_env() {
    INIT.call_once(|| {
        if let Ok(v) = std::env::var("SPIKEMOE_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
