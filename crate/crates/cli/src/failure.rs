use std::fmt;

use fedrecon::benchmark::BenchmarkError;
use fedrecon::embedder::EmbedError;
use fedrecon::federation::FederationError;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl fmt::Display) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }

    pub fn runtime(message: impl fmt::Display) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }

    /// Prefixes the message, e.g. with the offending path.
    pub fn context(self, what: impl fmt::Display) -> Self {
        Failure {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<BenchmarkError> for Failure {
    fn from(e: BenchmarkError) -> Self {
        match e {
            BenchmarkError::InvalidConfig(_) | BenchmarkError::Results(_) => Failure::usage(e),
            BenchmarkError::Embed(inner) => inner.into(),
            _ => Failure::runtime(e),
        }
    }
}

impl From<EmbedError> for Failure {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::InvalidSpec(_) | EmbedError::InvalidConfig(_) => Failure::usage(e),
            _ => Failure::runtime(e),
        }
    }
}

impl From<FederationError> for Failure {
    fn from(e: FederationError) -> Self {
        Failure::runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e)
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::runtime(e)
    }
}
