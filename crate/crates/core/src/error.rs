use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("weak-drive guard violated: eps/kappa = {ratio} exceeds {limit}")]
    WeakDrive { ratio: f64, limit: f64 },

    #[error("singular parameters: {0}")]
    SingularParameters(String),

    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),

    #[error("integration failed at t = {time} us: {reason}")]
    IntegrationFailure { time: f64, reason: String },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("outside oracle scope: {0}")]
    OracleScope(String),

    #[error("steady state did not converge (residual {residual:e})")]
    NonConvergence { residual: f64 },

    #[error("fit did not converge after {iterations} iterations (last iterate {last:?})")]
    FitNonConvergence { iterations: usize, last: [f64; 3] },

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    #[error("timestamps not strictly increasing: first inversion at index {index}")]
    Unsorted { index: usize },

    #[error("empty click stream")]
    EmptyStream,

    #[error("unresolved extrema: {0}")]
    UnresolvedExtrema(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by the caller's input (as opposed to a
    /// numerical failure inside a valid computation).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::WeakDrive { .. }
                | Error::UnsupportedRegime(_)
                | Error::OracleScope(_)
                | Error::Parse { .. }
                | Error::Unsorted { .. }
                | Error::EmptyStream
                | Error::Config(_)
                | Error::Io(_)
        )
    }
}
