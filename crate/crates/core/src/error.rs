// SPDX-License-Identifier: Apache-2.0

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose.
    #[error("{0}")]
    Dimension(String),

    /// A caller broke an operation's precondition.
    #[error("{0}")]
    Contract(String),

    #[error("{0}")]
    Config(String),

    /// Dataset or label contents are unusable.
    #[error("{0}")]
    Data(String),

    /// A binary container failed validation at `offset`.
    #[error("at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A loss term or gradient went non-finite.
    #[error("{0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-parsable class name used by the CLI error prefix.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Format { .. } => "format",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
            Error::Dimension(_) | Error::Contract(_) => 1,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use contract_err;
pub(crate) use dim_err;
