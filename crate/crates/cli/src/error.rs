use std::fmt;
use std::process::ExitCode;

/// Configuration problems are caught before any work starts; everything
/// that fails afterwards is a runtime error.
#[derive(Debug, Clone)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(3),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

/// One line: `error kind=<config|runtime> reason=<json string>`.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reason = serde_json::to_string(self.message()).expect("strings serialize");
        write!(f, "error kind={} reason={reason}", self.kind())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reasons_stay_on_one_line() {
        let e = CliError::Runtime("first\nsecond \"quoted\"".into());
        let line = e.to_string();
        assert!(!line.contains('\n'));
        assert_eq!(line, r#"error kind=runtime reason="first\nsecond \"quoted\"""#);
    }
}
