//! Experiment runner: configuration resolution, subcommands, exit codes.

pub mod commands;
pub mod config;

use mtl_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_IO: i32 = 5;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Progress(_) => EXIT_CONFIG,
        Error::Dataset(_) | Error::Ingest { .. } | Error::Label { .. } | Error::Dimension(_) => EXIT_DATA,
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::Io { .. } | Error::Checkpoint(_) => EXIT_IO,
        Error::Evaluation(_) | Error::Comparison(_) => EXIT_OTHER,
    }
}
