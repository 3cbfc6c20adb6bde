use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown preset `{0}` (expected one of ou-attract, ou-repel, sine-weak, control-lq)")]
    UnknownPreset(String),

    #[error("blow-up at step {step} (t = {time}): particle {particle} has a non-finite coordinate")]
    BlowUp { step: usize, time: f64, particle: usize },

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("measure flow covers [0, {available}] but [0, {requested}] was requested")]
    Coverage { available: f64, requested: f64 },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("ellipticity violated at state {state:?}: smallest eigenvalue of sigma sigma^T - sigma0^2 I is {eigenvalue}")]
    Ellipticity { state: Vec<f64>, eigenvalue: f64 },

    #[error("regression basis degenerate at node {node}: condition number {condition:.3e}")]
    BasisDegeneracy { node: usize, condition: f64 },

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("policy emitted an inadmissible action {action:?}")]
    Inadmissible { action: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
