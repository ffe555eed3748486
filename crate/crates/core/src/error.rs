use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {what} (index {index})")]
    Degenerate { what: String, index: usize },

    #[error("numerical failure: {what} (residual {residual:e} after {iterations} iterations)")]
    NumericalFailure {
        what: String,
        residual: f64,
        iterations: usize,
    },

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("resource exhausted: could not allocate {bytes} bytes for n = {n}")]
    Resource { n: usize, bytes: usize },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<LabError>,
    },
}

impl LabError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_layer(self, layer: usize) -> Self {
        LabError::AtLayer {
            layer,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        LabError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with layer/stage wrappers stripped.
    pub fn root(&self) -> &LabError {
        match self {
            LabError::AtLayer { source, .. } | LabError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line front end: 1 for
    /// configuration problems, 2 for numerical failures, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            LabError::InvalidInput(_) => 1,
            LabError::Io { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
