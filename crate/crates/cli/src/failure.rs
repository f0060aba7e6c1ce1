use std::fmt;

use standda::Error;

pub const CONFIG: i32 = 2;
pub const NUMERIC: i32 = 3;
pub const IO: i32 = 4;

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: CONFIG, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: NUMERIC, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: IO, message: message.into() }
    }

    /// Prefixes the message with the config key (or file) it concerns.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => IO,
            Error::EmptyComplement
            | Error::EmptyInterval { .. }
            | Error::MassUnderflow { .. }
            | Error::RegionMissesObserved { .. } => NUMERIC,
            _ => CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}
