//! Error type shared across the crate.
//!
//! Errors fall into three classes with distinct process exit codes so that
//! scripts can tell a bad invocation from a bad disk from a bad number:
//! validation/config problems exit 2, I/O problems exit 3, numerical
//! failures exit 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or size mismatch between tensors, panels, or grids.
    #[error("shape error: {0}")]
    Shape(String),

    /// Wrong number of panels or examples for a grid operation.
    #[error("arity error: {0}")]
    Arity(String),

    /// Invalid argument, option value, or input file content.
    #[error("validation error: {0}")]
    Validation(String),

    /// Bad or conflicting configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// Unsupported checkpoint / artifact format version.
    #[error("version error: {0}")]
    Version(String),

    /// Filesystem failure, annotated with the path that caused it.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values or a numerical routine that failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error class (documented in the CLI help).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Arity(_)
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Version(_) => 2,
            Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let validation = Error::Validation("x".into()).exit_code();
        let shape = Error::Shape("x".into()).exit_code();
        let io = Error::io("p", std::io::Error::other("x")).exit_code();
        let numerical = Error::Numerical("x".into()).exit_code();
        assert_eq!(validation, 2);
        assert_eq!(shape, 2);
        assert_eq!(io, 3);
        assert_eq!(numerical, 4);
        assert_ne!(validation, io);
        assert_ne!(io, numerical);
    }

    #[test]
    fn io_error_mentions_path() {
        let e = Error::io("/tmp/nope.bin", std::io::Error::other("boom"));
        assert!(e.to_string().contains("/tmp/nope.bin"));
    }
}
