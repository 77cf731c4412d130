use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the numeric core and the run harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced or received a NaN or infinite value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    /// `backward` was called on a tensor that is not attached to a tape.
    #[error("backward requires a tensor attached to a tape")]
    DetachedNode,

    /// Two attached operands belong to different tapes.
    #[error("operands of {op} are attached to different tapes")]
    TapeMismatch { op: &'static str },

    /// Training loss went NaN or stayed far above its initial value.
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    /// A confidence interval was requested over fewer than two samples.
    #[error("confidence interval requires at least 2 samples, got {got}")]
    InsufficientSeeds { got: usize },

    /// A convergence point was requested on a curve with under two points.
    #[error("loss curve needs at least 2 points")]
    EmptyCurve,

    /// Report aggregation found no completed runs.
    #[error("no completed runs under {path}")]
    MissingRun { path: String },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A serialized artifact (bank, checkpoint, log) failed validation.
    #[error("invalid {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    /// Wraps an IO error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
