use std::path::{Path, PathBuf};

use prefnet::ErrorKind;

/// Process exit codes.
pub mod code {
    pub const USAGE: i32 = 1;
    pub const LOAD: i32 = 2;
    pub const TRAIN: i32 = 3;
    pub const INFERENCE: i32 = 4;
    pub const MISSING_ARTIFACT: i32 = 5;
}

#[derive(Debug)]
pub enum CliError {
    Pipeline(prefnet::Error),
    Usage(String),
    MissingArtifact(PathBuf),
    /// An artifact exists but cannot be read back.
    Artifact(String),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(e) => match e.kind() {
                ErrorKind::Load => code::LOAD,
                ErrorKind::Train => code::TRAIN,
                ErrorKind::Inference => code::INFERENCE,
                ErrorKind::Usage => code::USAGE,
            },
            CliError::Usage(_) => code::USAGE,
            CliError::MissingArtifact(_) | CliError::Artifact(_) => code::MISSING_ARTIFACT,
            CliError::Io { .. } => code::LOAD,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Pipeline(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::MissingArtifact(p) => write!(
                f,
                "missing artifact {} (run `prefnet fit` first)",
                p.display()
            ),
            CliError::Artifact(m) => write!(f, "unreadable artifact: {m}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CliError {}

macro_rules! from_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Pipeline(e.into())
            }
        }
    )*};
}

from_pipeline!(
    prefnet::Error,
    prefnet::dataio::DataError,
    prefnet::crossfit::CrossFitError,
    prefnet::dml::DmlError,
    prefnet::baseline::BaselineError,
    prefnet::quantities::QuantityError,
    prefnet::simulate::SimError
);
