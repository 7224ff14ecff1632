//! Experiment orchestration for zero-shot knowledge distillation: config
//! loading, per-stage artifacts with provenance, sweeps and result tables.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{ExperimentConfig, Method};
pub use error::{CliError, CliResult};
pub use pipeline::Pipeline;

/// Keeps freed training buffers in the heap instead of returning them to the
/// kernel, which otherwise dominates runtime with page faults on large
/// batches. A no-op outside glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: glibc's mallopt takes the arena lock and only adjusts thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
