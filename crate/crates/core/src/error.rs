use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format: {0}")]
    Format(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("unknown phoneme symbol {0:?}")]
    UnknownPhoneme(String),

    #[error("unknown {kind} {id:?}; registered: {registered}")]
    UnknownBackend {
        kind: &'static str,
        id: String,
        registered: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("CTC target of length {target_len} with {repeats} repeats needs at least {needed} frames, got {frames}")]
    CtcInfeasible {
        target_len: usize,
        repeats: usize,
        needed: usize,
        frames: usize,
    },

    #[error("training diverged at step {step}; last good checkpoint kept")]
    Diverged { step: usize },

    #[error("non-finite value in reverse sampler at step {step}")]
    NonFinite { step: usize },

    #[error("codec training needs at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Name of the failing pipeline stage, if the error was raised inside one.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub trait StageContext<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => e.in_stage(name),
        })
    }
}
