use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrlError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DrlError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for width {width}")]
    Label { label: usize, width: usize },

    #[error("degenerate feature at node {node}: {reason}")]
    DegenerateFeature { node: usize, reason: &'static str },

    #[error("degenerate replicator update at node {node}: zero normalizer")]
    DegenerateUpdate { node: usize },

    #[error("shot budget exceeded: requested {requested} shots, {available} available")]
    Budget { requested: usize, available: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for DrlError {
    fn from(e: std::io::Error) -> Self {
        DrlError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for DrlError {
    fn from(e: serde_json::Error) -> Self {
        DrlError::Io(e.to_string())
    }
}
