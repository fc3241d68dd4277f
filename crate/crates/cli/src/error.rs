use std::fmt;
use std::path::Path;

use serde::Serialize;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

/// Failure carried up to `main`, printed as a one-line JSON record.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    #[serde(skip)]
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            kind: "validation".into(),
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INTERNAL,
            kind: "internal".into(),
            message: message.into(),
        }
    }

    pub fn not_converged(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NOT_CONVERGED,
            kind: "not_converged".into(),
            message: message.into(),
        }
    }

    /// Error while reading or checking an input document.
    pub fn input(path: &Path, err: mlopf::Error) -> Self {
        CliError::validation(format!("{}: {err}", path.display()))
    }

    pub fn record(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<mlopf::Error> for CliError {
    fn from(err: mlopf::Error) -> Self {
        let code = match err.kind() {
            "validation" | "dimension" => EXIT_VALIDATION,
            _ => EXIT_INTERNAL,
        };
        CliError {
            code,
            kind: err.kind().into(),
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError {
            code: EXIT_INTERNAL,
            kind: "io".into(),
            message: err.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError {
            code: EXIT_INTERNAL,
            kind: "io".into(),
            message: err.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::internal(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
