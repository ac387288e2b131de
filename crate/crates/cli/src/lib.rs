//! Scenario runner for `empc-core`: TOML scenario files, built-in
//! experiments, CSV/SVG artifacts with a hash manifest, and numeric diffs
//! between run directories.

pub mod builtin;
pub mod config;
pub mod diff;
pub mod error;
pub mod runner;
pub mod svg;

pub use config::{Override, Scenario};
pub use diff::{diff_artifacts, DiffReport};
pub use error::{CliError, CliResult};
pub use runner::{run, RunReport};
