//! Worker pool sizing.

use std::num::NonZeroUsize;

use crate::error::{CliError, Result};

/// Caps the worker count; unset means one worker per available core.
pub const THREADS_ENV: &str = "DANCE_THREADS";

/// Worker count from a `DANCE_THREADS` value.
pub fn parse_threads(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(std::thread::available_parallelism().map_or(1, NonZeroUsize::get)),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let value = std::env::var(THREADS_ENV).ok();
    let n = parse_threads(value.as_deref())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))
}
