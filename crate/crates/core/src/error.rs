use thiserror::Error;

/// Errors produced by the estimation pipeline and its I/O layer.
#[derive(Debug, Error)]
pub enum CelcError {
    #[error("undistortion did not converge after {iterations} iterations (residual {residual:.3e})")]
    UndistortionDiverged { iterations: usize, residual: f64 },
    #[error("zero or non-finite vector where a {0} was expected")]
    ZeroVector(&'static str),
    #[error("bearing must point in front of the camera (z = {0})")]
    BehindCamera(f64),
    #[error("line at infinity has no finite image distance")]
    LineAtInfinity,
    #[error("event time {t_k} outside cluster interval [{t_s}, {t_e}]")]
    TimeOutsideInterval { t_k: f64, t_s: f64, t_e: f64 },
    #[error("invalid cluster interval: t_e ({t_e}) must exceed t_s ({t_s})")]
    InvalidInterval { t_s: f64, t_e: f64 },
    #[error("transferred line vanishes (|Bv| = {0:.3e})")]
    DegenerateTransfer(f64),
    #[error("stream ended after {available} of {requested} events")]
    PartialWindow { available: usize, requested: usize },
    #[error("need at least {required} points for a line fit, got {got}")]
    NotEnoughPoints { required: usize, got: usize },
    #[error("points are coincident; line is undetermined")]
    RankDeficient,
    #[error("cluster rejected: {0}")]
    ClusterRejected(String),
    #[error("no admissible constraint rows")]
    NoRows,
    #[error("need at least {required} constraint rows, got {got}")]
    TooFewRows { required: usize, got: usize },
    #[error("all refinement residuals were dropped")]
    AllResidualsDropped,
    #[error("projected line collapses to a point ({0:.3} px)")]
    CollapsedLine(f64),
    #[error("time {t} outside motion interval [0, {duration}]")]
    TimeOutsideMotion { t: f64, duration: f64 },
    #[error("ground-truth velocity is zero; metrics are undefined")]
    ZeroGroundTruth,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CelcError>;
