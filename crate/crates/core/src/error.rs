use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Total mass of a measure that should be normalized is zero, negative or
    /// not finite. `step` is the filter step where it happened, if known.
    #[error("zero or non-finite mass{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    ZeroMass { step: Option<usize> },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("kappa = {kappa} is not positive for alpha = {alpha}, c = {c}; admissible c range is ({c_lo}, {c_hi})")]
    KappaNonpositive {
        kappa: f64,
        alpha: f64,
        c: f64,
        c_lo: f64,
        c_hi: f64,
    },

    #[error("gamma_hat = {gamma_hat} must exceed 2/3; enlarge the observation set")]
    GammaTooSmall { gamma_hat: f64 },

    #[error("degenerate fit: only {usable} usable points (need at least 5)")]
    DegenerateFit { usable: usize },

    #[error("observation path too short: need {needed}, have {have}")]
    PathTooShort { needed: usize, have: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}
