//! CLI error classification; each class maps to a distinct exit code.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown subcommand, malformed flags.
    Usage(String),
    /// The config failed to parse or validate.
    Config(String),
    /// A required artifact (checkpoint, TSV, vocabulary) is missing or
    /// malformed.
    MissingArtifact(String),
    /// Filesystem trouble unrelated to missing artifacts.
    Io(String),
    /// An error bubbled up from the core library.
    Core(trident_core::Error),
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_ARTIFACT: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_CORE: i32 = 1;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingArtifact(_) => EXIT_ARTIFACT,
            CliError::Io(_) => EXIT_IO,
            CliError::Core(_) => EXIT_CORE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::MissingArtifact(msg) => write!(f, "artifact error: {msg}"),
            CliError::Io(msg) => write!(f, "io error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<trident_core::Error> for CliError {
    fn from(e: trident_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl std::error::Error for CliError {}
