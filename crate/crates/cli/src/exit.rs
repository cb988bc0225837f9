use std::fmt;
use std::path::Path;

use evflex::Error;

pub const USAGE: u8 = 2;
pub const UNKNOWN_KEY: u8 = 3;
pub const INVALID_VALUE: u8 = 4;
pub const IO: u8 = 5;
pub const MALFORMED: u8 = 6;
pub const SIMULATION: u8 = 7;
pub const INVARIANT: u8 = 8;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// A core error with where it came from.
#[derive(Debug)]
pub struct CliError {
    inner: Error,
    context: Option<String>,
    line: Option<usize>,
}

impl CliError {
    pub fn new(inner: Error) -> Self {
        Self {
            inner,
            context: None,
            line: None,
        }
    }

    pub fn context(mut self, context: impl Into<String>) -> Self {
        self.context = Some(context.into());
        self
    }

    /// Names the config file and the line that sets the offending key.
    pub fn in_config(mut self, path: &Path, text: &str) -> Self {
        let key = match &self.inner {
            Error::InvalidParameter { name, .. } => name.rsplit('.').next(),
            Error::Io(e) if e.to_string().starts_with("fleet_csv") => Some("fleet_csv"),
            Error::Io(e) if e.to_string().starts_with("carbon csv") => Some("path"),
            _ => None,
        };
        if let Some(key) = key {
            let quoted = format!("\"{key}\"");
            self.line = text.lines().position(|l| l.contains(&quoted)).map(|i| i + 1);
        }
        self.context(path.display().to_string())
    }

    pub fn code(&self) -> u8 {
        code_of(&self.inner)
    }
}

impl From<Error> for CliError {
    fn from(inner: Error) -> Self {
        Self::new(inner)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.context, self.line) {
            (Some(c), Some(l)) => write!(f, "{c}:{l}: ")?,
            (Some(c), None) => write!(f, "{c}: ")?,
            _ => {}
        }
        write!(f, "{}", self.inner)
    }
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::AtSlot { source, .. } => match code_of(source) {
            INVARIANT => INVARIANT,
            _ => SIMULATION,
        },
        Error::Format(m) if m.contains("unknown field") => UNKNOWN_KEY,
        Error::Json(j) => {
            let msg = j.to_string();
            if msg.contains("unknown field") {
                UNKNOWN_KEY
            } else if j.is_data() && (msg.contains("unknown variant") || msg.contains("invalid value")) {
                INVALID_VALUE
            } else if j.is_io() {
                IO
            } else {
                MALFORMED
            }
        }
        Error::InvalidParameter { .. } | Error::NegativeInput { .. } | Error::Scenario(_) => INVALID_VALUE,
        Error::Io(_) => IO,
        Error::Format(_) | Error::Csv(_) | Error::CarbonTrace(_) => MALFORMED,
        Error::Solver(_)
        | Error::Dispatch(_)
        | Error::InfeasibleSession { .. }
        | Error::Dimension(_)
        | Error::MissingReference(_) => SIMULATION,
        Error::Invariant(_) => INVARIANT,
    }
}
