use std::path::PathBuf;

use crate::branch::Branch;
use crate::hooks::Stage;

pub type Result<T, E = SculptError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SculptError {
    /// A caller broke an operation's precondition (shapes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value showed up where finite data is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage} step {step}{}: {source}", branch.map(|b| format!(" [{b} branch]")).unwrap_or_default())]
    AtStep {
        stage: Stage,
        step: usize,
        branch: Option<Branch>,
        #[source]
        source: Box<SculptError>,
    },

    #[error("pass {pass}: {source}")]
    InPass {
        pass: usize,
        #[source]
        source: Box<SculptError>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl SculptError {
    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_step(self, stage: Stage, step: usize, branch: Option<Branch>) -> Self {
        Self::AtStep {
            stage,
            step,
            branch,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_pass(self, pass: usize) -> Self {
        Self::InPass {
            pass,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage/step/pass wrappers peeled off.
    pub fn root(&self) -> &SculptError {
        match self {
            Self::AtStep { source, .. } | Self::InPass { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Self::Config(_) | Self::Json { .. } => 2,
            Self::Numeric(_) => 3,
            _ => 1,
        }
    }
}
