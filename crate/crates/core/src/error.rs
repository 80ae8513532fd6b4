use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid beam geometry: b={b}, h={h}, t={t} (requires b > 2t, h > 2t and positive dimensions)")]
    InvalidGeometry { b: f64, h: f64, t: f64 },

    #[error("subset simulation did not reach the failure domain within {max_levels} levels (thresholds: {thresholds:?})")]
    MaxLevelsExceeded {
        max_levels: usize,
        thresholds: Vec<f64>,
    },

    #[error("no failure sample lies in the region; increase the budget of the previous stage")]
    NoSeedInRegion,

    #[error("degenerate threshold: {0}")]
    DegenerateThreshold(String),

    #[error("query outside the design space: {0:?}")]
    UndefinedQuery(Vec<f64>),

    #[error("surface fit failed: {0}")]
    Fit(String),

    #[error("no feasible design found; least violating point {phi:?} has failure probability {constraint:e}")]
    Infeasible { phi: Vec<f64>, constraint: f64 },

    #[error("internal consistency check failed: {0}")]
    Internal(String),

    #[error("comparison failed: {0}")]
    Comparison(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
