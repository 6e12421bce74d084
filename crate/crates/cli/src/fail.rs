//! Exit-code bookkeeping: 1 for bad input, 2 for internal errors.

use std::fmt;

pub const BAD_INPUT: u8 = 1;
pub const INTERNAL: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn bad_input(msg: impl fmt::Display) -> Failure {
    Failure {
        code: BAD_INPUT,
        error: anyhow::anyhow!("{msg}"),
    }
}

pub trait ExitCode<T> {
    /// Blames the caller's input.
    fn bad_input(self) -> Outcome<T>;
    fn internal(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> ExitCode<T> for Result<T, E> {
    fn bad_input(self) -> Outcome<T> {
        self.map_err(|e| Failure {
            code: BAD_INPUT,
            error: e.into(),
        })
    }

    fn internal(self) -> Outcome<T> {
        self.map_err(|e| Failure {
            code: INTERNAL,
            error: e.into(),
        })
    }
}

impl From<culicid_client::ClientError> for Failure {
    fn from(e: culicid_client::ClientError) -> Self {
        let code = match &e {
            culicid_client::ClientError::Api { status, .. } if status.is_client_error() => BAD_INPUT,
            _ => INTERNAL,
        };
        Failure { code, error: e.into() }
    }
}
