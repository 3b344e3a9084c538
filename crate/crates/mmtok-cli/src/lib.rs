//! Library half of the `mmtok` binary: configuration, the six pipeline
//! commands, and a toy-workspace generator for demos and tests.

pub mod commands;
pub mod config;
pub mod toydata;

use std::fmt;

/// Command errors carry their exit code: `Usage` exits 2 (bad flags, bad or
/// missing config/inputs), `Runtime` exits 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

macro_rules! runtime_from {
    ($($ty:ty),+) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })+
    };
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    mmtok::rvq::RvqError,
    mmtok::vocab::VocabError,
    mmtok::sequence::BuildError,
    mmtok::parser::ParserError,
    mmtok::lm::LmError,
    mmtok::refiner::RefinerError,
    mmtok::synth::SynthError
);
