//! Experiment harness around `flowtrace-core`: the four commands, their
//! config-file handling, and the report writers.

pub mod config;
pub mod experiments;
pub mod output;
pub mod synth;

use flowtrace_core::Error;

/// Process exit code for an error: 2 for training divergence, 1 for
/// anything wrong with inputs or configuration.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => 2,
        _ => 1,
    }
}
