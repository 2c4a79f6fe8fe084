use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate reservoir: {0}")]
    Degenerate(String),

    #[error("dataset has {len} samples but washout is {k0}")]
    TooShort { len: usize, k0: usize },

    #[error("fitting undefined: measured output is constant")]
    ConstantOutput,

    #[error("lasso did not converge after {sweeps} sweeps (objective {objective:e}, last change {last_change:e})")]
    LassoNotConverged {
        sweeps: usize,
        objective: f64,
        last_change: f64,
        last_iterate: Vec<f64>,
    },

    #[error("readout is identically zero; nothing to keep")]
    EmptySupport,

    #[error("keep set is not closed under reservoir coupling: state {from} depends on removed state {to}")]
    NotClosed { from: usize, to: usize },

    #[error("keep set drops read-out state {0}")]
    DropsSupport(usize),

    #[error("pH root not bracketed in [0, 14] (residuals {lo:e}, {hi:e})")]
    PhBracket { lo: f64, hi: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
