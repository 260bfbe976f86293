use std::fmt;
use std::path::Path;

use serde::Serialize;

/// Failure class, which fixes the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    /// Bad arguments, invalid configuration or missing inputs: exit code 1.
    Usage,
    /// Failure while running a command: exit code 2.
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub class: ErrorClass,
    /// Short machine-readable category (`config`, `missing_input`, `checkpoint`, …).
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(class: ErrorClass, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            class,
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Usage, "usage", message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Usage, "config", message)
    }

    pub fn config_from(e: exitflow_core::Error) -> Self {
        Self::config(e.to_string())
    }

    pub fn missing(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(
            ErrorClass::Usage,
            "missing_input",
            format!("{}: {e}", path.display()),
        )
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(
            ErrorClass::Runtime,
            "io",
            format!("{}: {e}", path.display()),
        )
    }

    pub fn corrupt(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Runtime, kind, message)
    }

    pub fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.class {
            ErrorClass::Usage => 1,
            ErrorClass::Runtime => 2,
        }
    }

    /// Single-line JSON record for stderr.
    pub fn to_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            class: ErrorClass,
            exit_code: i32,
            message: &'a str,
        }
        serde_json::to_string(&Line {
            error: self.kind,
            class: self.class,
            exit_code: self.exit_code(),
            message: &self.message,
        })
        .expect("error line serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<exitflow_core::Error> for CliError {
    fn from(e: exitflow_core::Error) -> Self {
        match e {
            exitflow_core::Error::Io { path, message } => Self::io(&path, message),
            other => Self::new(ErrorClass::Runtime, "runtime", other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_are_single_line_json() {
        let e = CliError::config("bad\nvalue \"x\"");
        let line = e.to_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "config");
        assert_eq!(v["exit_code"], 1);
        assert_eq!(CliError::corrupt("checkpoint", "x").exit_code(), 2);
    }
}
