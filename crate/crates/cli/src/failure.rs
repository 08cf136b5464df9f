use std::fmt;
use std::process::ExitCode;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1.
    Runtime(String),
    /// Exit 2: bad flags, bad config values, conflicting options.
    Usage(String),
    /// Exit 3: malformed `.pfse`, `.pfsp` or score CSV input.
    Format(String),
    /// Exit 4: at least one theory check failed.
    Theory(usize),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Format(_) => 3,
            Failure::Theory(_) => 4,
        })
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Runtime(m) => write!(f, "error: {m}"),
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Format(m) => write!(f, "format error: {m}"),
            Failure::Theory(n) => write!(f, "{n} theory check(s) failed"),
        }
    }
}

impl From<mdmf::Error> for Failure {
    fn from(e: mdmf::Error) -> Self {
        if e.is_format_error() {
            Failure::Format(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;
