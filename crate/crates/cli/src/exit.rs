//! Exit-code policy: 0 success (including partial batches), 1 everything
//! failed, 2 unreadable input, 3 bad config or model.

use std::fmt;

pub const EXIT_FAILED: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure { code, error: error.into() }
    }

    pub fn msg(code: u8, msg: impl fmt::Display) -> Self {
        Failure { code, error: anyhow::anyhow!("{msg}") }
    }

    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self::new(EXIT_CONFIG, error)
    }

    pub fn io(error: impl Into<anyhow::Error>) -> Self {
        Self::new(EXIT_IO, error)
    }
}

/// Exit code for a library error surfacing on its own.
pub fn code_for(e: &cardioquant::Error) -> u8 {
    match e {
        e if e.is_io() => EXIT_IO,
        cardioquant::Error::ModelFormat(_) => EXIT_CONFIG,
        _ => EXIT_FAILED,
    }
}

impl From<cardioquant::Error> for Failure {
    fn from(e: cardioquant::Error) -> Self {
        Failure::new(code_for(&e), e)
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exit {}: {:#}", self.code, self.error)
    }
}
