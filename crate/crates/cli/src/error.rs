use std::fmt;

/// Process outcome other than success, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// A deterministic check failed (exit 1).
    Check(String),
    /// Bad flags, config or input files (exit 2).
    Usage(String),
    /// Failure while running (exit 3).
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Errors raised while executing: numeric and I/O failures are runtime,
/// everything else traces back to the inputs.
impl From<hfb::Error> for CliError {
    fn from(e: hfb::Error) -> Self {
        use hfb::Error as E;
        match e {
            E::NonFiniteLoss { .. } | E::NonFinite { .. } | E::Io(_) | E::Lifecycle { .. } => {
                runtime(e)
            }
            _ => usage(e),
        }
    }
}
