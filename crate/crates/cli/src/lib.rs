pub mod commands;
pub mod config;
pub mod log;

use config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CORRUPT: i32 = 3;

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<idxdiff_core::Error>() {
            if e.is_validation() {
                return EXIT_VALIDATION;
            }
            if e.is_corrupt_input() {
                return EXIT_CORRUPT;
            }
            return EXIT_RUNTIME;
        }
    }
    EXIT_RUNTIME
}
