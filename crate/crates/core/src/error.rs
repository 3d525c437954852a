use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("mass matrix is singular or not positive definite at q = {q:?}")]
    SingularMass { q: Vec<f64> },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} is not positive definite (min eigenvalue {min_eig:.6e})")]
    NotPositiveDefinite { what: String, min_eig: f64 },

    #[error("stability precondition failed: {0}")]
    Unstable(String),

    #[error("integration diverged at t = {t}; last finite sample index {last_finite}")]
    Diverged { last_finite: usize, t: f64 },

    #[error("trajectory has no acceleration series; run reconstruct_accel first")]
    MissingAcceleration,

    #[error("trajectory too short: {len} samples, at least {min} required")]
    TooShort { len: usize, min: usize },

    #[error("coordinate {coordinate} is unidentifiable: it never moves in any experiment")]
    Unidentifiable { coordinate: usize },

    #[error("normal matrix is ill-conditioned (cond = {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            what: what.to_string(),
            expected,
            found,
        })
    }
}
