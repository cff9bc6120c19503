//! Training, synthetic data, benchmarks and self-checks.

pub mod bench;
pub mod corpus;
pub mod train;
pub mod verify;

use crate::error::{Error, Result};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "HPAC_THREADS";

/// Size the global thread pool from [`THREADS_ENV`] when set. Returns the
/// pool size in effect. Calling it again after the pool exists is a no-op.
pub fn init_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{} must be a positive integer, got {:?}", THREADS_ENV, v)))?;
        // Fails only if the pool was already built; keep the existing one.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
