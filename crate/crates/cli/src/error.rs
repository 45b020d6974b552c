use std::fmt;

/// Command failure with a stable exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Parse(String),
    Check(String),
    Other(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Parse(_) => 4,
            CliError::Check(_) => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CliError::Other(_) => "other",
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Parse(_) => "parse",
            CliError::Check(_) => "check",
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(self, path: &std::path::Path) -> Self {
        let p = path.display();
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{p}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{p}: {m}")),
            CliError::Parse(m) => CliError::Parse(format!("{p}: {m}")),
            CliError::Check(m) => CliError::Check(format!("{p}: {m}")),
            CliError::Other(m) => CliError::Other(format!("{p}: {m}")),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Parse(m) | CliError::Check(m) | CliError::Other(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: String = self.message().chars().map(|c| if c == '\n' { ' ' } else { c }).collect();
        write!(f, "error: code={} msg={}", self.name(), flat)
    }
}

impl From<partnet_core::Error> for CliError {
    fn from(e: partnet_core::Error) -> Self {
        use partnet_core::autodiff::Error as Ad;
        match e {
            partnet_core::Error::Io(e) => CliError::Io(e.to_string()),
            partnet_core::Error::Parse(m) => CliError::Parse(m),
            partnet_core::Error::Autodiff(Ad::Io(m)) => CliError::Io(m),
            partnet_core::Error::Autodiff(Ad::Checkpoint(m)) => CliError::Parse(format!("checkpoint: {m}")),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<partnet_core::autodiff::Error> for CliError {
    fn from(e: partnet_core::autodiff::Error) -> Self {
        CliError::from(partnet_core::Error::from(e))
    }
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
