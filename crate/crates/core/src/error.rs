use thiserror::Error;

use crate::shift::Symbol;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("truncation mismatch: {0}")]
    TruncationMismatch(String),
    #[error("fiber mismatch: expected time {expected}, got {actual}")]
    FiberMismatch { expected: i64, actual: i64 },
    #[error("word {0:?} is not admissible")]
    NotAdmissible(Vec<Symbol>),
    #[error("finite range not certified for letter {letter} at scan bound {bound}")]
    NotFiniteRange { letter: Symbol, bound: Symbol },
    #[error("bounded access not certified for letter {letter} at scan bound {bound}")]
    NotBoundedAccess { letter: Symbol, bound: Symbol },
    #[error("mixing not certified for ({a}, {b}) at horizon {horizon}")]
    NotMixing { a: Symbol, b: Symbol, horizon: usize },
    #[error("summability not certifiable: {0}")]
    SummabilityUncertifiable(String),
    #[error("degenerate normalizer {value:e} at time {time}")]
    DegenerateNormalizer { time: i64, value: f64 },
    #[error("anchor starved: no admissible anchor in F at time {time}")]
    AnchorStarved { time: i64 },
    #[error("window not covered: time {time} outside [{start}, {end}]")]
    WindowNotCovered { time: i64, start: i64, end: i64 },
    #[error("integral is not positive: {0:e}")]
    NonPositiveIntegral(f64),
    #[error("cone pipeline stage `{stage}` infeasible: {reason}")]
    StageInfeasible { stage: &'static str, reason: String },
    #[error("word space too large: {0}")]
    TooLarge(String),
    #[error("potential table: {0}")]
    Table(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
