use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("point outside grid box: coordinate {coord} = {value} not in [{lower}, {upper}]")]
    OutOfBox {
        coord: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("gram matrix is indefinite: smallest eigenvalue {0:e}")]
    IndefiniteGram(f64),

    #[error(
        "sampler aborted after {proposals} proposals: {accepted} accepted \
         (rate {rate:e}, expected {expected:e}, floor {floor:e})"
    )]
    SamplerAbort {
        proposals: u64,
        accepted: u64,
        rate: f64,
        expected: f64,
        floor: f64,
    },

    #[error("frequency grid covers only {covered} of the Fourier measure (need {required})")]
    GridMassDeficit { covered: f64, required: f64 },

    #[error("margin certification failed: {0}")]
    Certification(String),

    #[error("example stream exhausted after {got} of {needed} examples")]
    StreamExhausted { needed: usize, got: usize },

    #[error("non-finite SGD update at iteration {0}")]
    NonFiniteUpdate(usize),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
