use thiserror::Error;

/// Errors produced anywhere in the detector toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: {msg}")]
    Shape { layer: String, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("quantizer step must be positive, got {0}")]
    InvalidStep(f64),

    #[error("integer value {value} outside quantizer range [{min}, {max}]")]
    OutOfRange { value: i64, min: i64, max: i64 },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("graph is already folded")]
    AlreadyFolded,

    #[error("accumulator overflow in layer {layer}: worst case {bound} exceeds i32")]
    Overflow { layer: String, bound: i64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("synthesis stage `{stage}` failed: {source}")]
    Synthesis {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("engine mismatch: {0}")]
    Engine(String),

    #[error("replay mismatch: {0}")]
    Replay(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end: 1 for input
    /// problems, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Overflow { .. } => 2,
            _ => 1,
        }
    }
}
