//! Exit-code classification: 0 success, 1 runtime failure, 2 configuration error.

use std::fmt;

use metgan_core::Error as CoreError;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_)
                | CoreError::Leakage(_)
                | CoreError::MissingChannel { .. }
                | CoreError::DimensionMismatch { .. }
                | CoreError::SegmentorNotFrozen
                | CoreError::UnpairedBatch => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classification() {
        assert_eq!(exit_code(&config_error("x")), EXIT_CONFIG);
        let wrapped = Err::<(), _>(CoreError::Leakage("a".into())).context("evaluating").unwrap_err();
        assert_eq!(exit_code(&wrapped), EXIT_CONFIG);
        let nan = anyhow::Error::from(CoreError::NonFinite { term: "l".into() });
        assert_eq!(exit_code(&nan), EXIT_RUNTIME);
        assert_eq!(exit_code(&anyhow::anyhow!("disk full")), EXIT_RUNTIME);
    }
}
