use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid reward: {0}")]
    InvalidReward(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("discount {gamma} outside {range}")]
    InvalidDiscount { gamma: f64, range: &'static str },

    #[error("invalid correction time: {0}")]
    InvalidCorrection(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("singular linear system in policy evaluation")]
    Singular,

    #[error("{0} did not converge")]
    NonConvergence(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed user input rather than numerics or IO.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Singular | Error::NonConvergence(_) | Error::Io(_) | Error::Csv(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}

pub(crate) fn check_discount_open(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDiscount { gamma, range: "(0, 1)" })
    }
}

pub(crate) fn check_discount_half_open(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidDiscount { gamma, range: "[0, 1)" })
    }
}

pub(crate) fn check_discount_closed(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidDiscount { gamma, range: "[0, 1]" })
    }
}
