//! Pipeline driver behind the `spikedistill` binary.

pub mod commands;
pub mod config;

use config::ConfigError;

/// A problem with the user's input rather than with the program.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 2 for user or config errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use spikedistill::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. }
                | E::Format { .. }
                | E::Checkpoint(_)
                | E::InvalidArgument(_)
                | E::NotConvertible(_)
                | E::Distill(_) => 2,
                E::Shape { .. } | E::Divergence(_) | E::Calibration(_) => 1,
            };
        }
    }
    1
}
