//! Interval analysis and sampled execution at the LLVM IR level.
//!
//! The pipeline works on one optimized base IR module:
//!
//! 1. [`ir`] parses the module and numbers its basic blocks.
//! 2. [`analyze`] instruments every block with a counting hook; running the
//!    result splits execution into fixed-size intervals of executed IR
//!    instructions and records a block vector and count-stamp vector for each.
//! 3. [`profile`] reads and validates those interval records.
//! 4. [`selection`] picks representative intervals (random or k-means).
//! 5. [`marker`] turns interval boundaries into (block, execution count) markers.
//! 6. [`nugget`] emits per-sample IR that fires actions at those markers.
//! 7. [`harness`] drives the external toolchain, times runs, and extrapolates.

pub mod analyze;
pub mod error;
pub mod harness;
pub mod ir;
pub mod marker;
pub mod nugget;
pub mod profile;
pub mod selection;

pub use error::{Error, Result};

use std::path::Path;

/// Write-then-rename so readers never observe a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ir::write_file_atomic(path, bytes).map_err(|e| Error::io(path, e))
}
