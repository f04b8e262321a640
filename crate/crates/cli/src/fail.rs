//! Error classes and their process exit codes.

use std::fmt;

pub const EXIT_INTERNAL: u8 = 1;
// 2 is left to clap for usage errors
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_VALIDATION: u8 = 4;
pub const EXIT_CHECK: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(error: anyhow::Error) -> Self {
        Self { code: EXIT_INPUT, error }
    }

    pub fn check(error: anyhow::Error) -> Self {
        Self { code: EXIT_CHECK, error }
    }
}

pub fn validation(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        error,
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Classifies a library error: unreadable or malformed inputs versus
/// inputs that are well-formed but inconsistent with each other.
pub fn code_of(e: &hmrn_core::Error) -> u8 {
    use hmrn_core::Error::*;
    match e {
        Io { .. } | Parse { .. } | Data(_) | Label { .. } | BadMagic { .. } | Version { .. } | Truncated(_)
        | Checksum { .. } | Malformed(_) | Json(_) => EXIT_INPUT,
        Shape { .. } | InvalidArgument(_) | Config(_) => EXIT_VALIDATION,
        InferContext { .. } => EXIT_INTERNAL,
    }
}

impl From<hmrn_core::Error> for Failure {
    fn from(e: hmrn_core::Error) -> Self {
        Self {
            code: code_of(&e),
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .chain()
            .find_map(|c| c.downcast_ref::<hmrn_core::Error>())
            .map_or(EXIT_INTERNAL, code_of);
        Self { code, error }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Attaches context to a library result while keeping its exit code.
pub trait Ctx<T> {
    fn ctx(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T> Ctx<T> for Result<T, hmrn_core::Error> {
    fn ctx(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| Failure {
            code: code_of(&e),
            error: anyhow::Error::new(e).context(what.to_string()),
        })
    }
}
