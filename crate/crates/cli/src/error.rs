//! Exit-code classification for command failures.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 1,
    Config = 2,
    Data = 3,
    Internal = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn msg(kind: Kind, msg: impl fmt::Display) -> Self {
        Self::new(kind, anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult<T> = Result<T, CliError>;

/// Tags a library result with the exit kind it maps to.
pub trait Classify<T> {
    fn or_kind(self, kind: Kind) -> CmdResult<T>;
    fn data(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.or_kind(Kind::Data)
    }
    fn internal(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.or_kind(Kind::Internal)
    }
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_kind(self, kind: Kind) -> CmdResult<T> {
        self.map_err(|e| CliError::new(kind, e))
    }
}
