use std::fmt;

use serde_json::json;
use tempo::TempoError;

/// A failed command with its exit code and a machine-readable kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, kind: "usage", message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 1, kind: "config", message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError { code: 2, kind: "validation", message: message.into() }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CliError { code: 1, kind: "io", message: format!("{}: {e}", path.display()) }
    }

    /// One JSON object on one line, keys sorted.
    pub fn to_line(&self) -> String {
        json!({ "code": self.code, "error": self.kind, "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<TempoError> for CliError {
    fn from(e: TempoError) -> Self {
        let message = e.to_string();
        let (code, kind) = match e {
            TempoError::Leakage(_) => (2, "leakage"),
            TempoError::Divergence(_) => (3, "divergence"),
            TempoError::Io { .. } => (1, "io"),
            _ => (2, "validation"),
        };
        CliError { code, kind, message }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError { code: 1, kind: "io", message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_sorted_json() {
        let line = CliError::from(TempoError::Leakage("t in sources".into())).to_line();
        assert!(!line.contains('\n'));
        assert_eq!(line, r#"{"code":2,"error":"leakage","message":"leakage: t in sources"}"#);
    }

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(CliError::from(TempoError::Divergence("nan".into())).code, 3);
        assert_eq!(CliError::from(TempoError::NoRows).code, 2);
        assert_eq!(CliError::config("x").code, 1);
    }
}
