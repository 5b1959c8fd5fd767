//! Stages, pipeline runner and error classification behind the `hdpgp` binary.

pub mod commands;
pub mod pipeline;

/// Bad arguments or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 1 for usage errors, 3 for numerical failures, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<hdpgp::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}
