use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing prerequisite: {what} not found at {}", path.display())]
    MissingPrerequisite { what: &'static str, path: PathBuf },

    #[error("port {port} is already in use")]
    PortInUse {
        port: u16,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("no test instance with id {0}")]
    UnknownInstance(u64),

    #[error("no sweep curve for rho = {rho} (defer_only = {defer_only})")]
    UnknownCurve { rho: f64, defer_only: bool },

    #[error(transparent)]
    Core(#[from] decode_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit status: 2 for a missing prerequisite or busy port, 3 for
    /// a numeric abort, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingPrerequisite { .. } | CliError::PortInUse { .. } => 2,
            CliError::Core(e) if e.is_numeric_abort() => 3,
            _ => 1,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::MissingPrerequisite { .. } => "missing_prerequisite",
            CliError::PortInUse { .. } => "port_in_use",
            CliError::Usage(_) => "bad_request",
            CliError::UnknownInstance(_) | CliError::UnknownCurve { .. } => "not_found",
            CliError::Core(e) => e.code(),
            CliError::Io(_) => "io",
            CliError::Json(_) => "bad_json",
        }
    }

    /// The exclusive group named by a group-conflict error.
    pub fn group(&self) -> Option<usize> {
        match self {
            CliError::Core(decode_core::Error::GroupConflict { group, .. }) => Some(*group),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let missing = CliError::MissingPrerequisite {
            what: "checkpoint",
            path: "x".into(),
        };
        assert_eq!(missing.exit_code(), 2);
        let diverged = decode_core::Error::Diverged {
            stage: "gate",
            epoch: 0,
            loss: f64::NAN,
        };
        let wrapped = decode_core::Error::SweepPoint {
            lambda: 1.0,
            source: Box::new(diverged),
        };
        assert_eq!(CliError::from(wrapped).exit_code(), 3);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
    }

    #[test]
    fn group_is_reported() {
        let e = CliError::from(decode_core::Error::GroupConflict {
            group: 1,
            detail: String::new(),
        });
        assert_eq!(e.group(), Some(1));
        assert_eq!(e.code(), "group_conflict");
    }
}
