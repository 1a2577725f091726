use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    Core(unitflow::Error),
    Usage(String),
    /// Output exists and `--force` was not given.
    Exists(PathBuf),
    /// A required input or earlier stage is missing.
    Missing(String),
}

impl From<unitflow::Error> for CliError {
    fn from(e: unitflow::Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Exists(p) => write!(f, "{} already exists; pass --force to replace it", p.display()),
            CliError::Missing(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "UsageError",
            CliError::Exists(_) => "AlreadyExists",
            CliError::Missing(_) => "MissingInput",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Last line on stderr: one JSON object with the error kind and message.
    pub fn report(&self) {
        let line = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        eprintln!("{line}");
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
