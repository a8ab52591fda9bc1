use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("site index {site} out of range for {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },

    #[error("sites must be distinct (got {0} twice)")]
    CoincidentSites(usize),

    #[error("sector ({n_sites} sites, {n_holes} holes, {n_up:?} up) exceeds dimension cap {cap}")]
    Capacity {
        n_sites: usize,
        n_holes: usize,
        n_up: Option<usize>,
        cap: usize,
    },

    #[error("invalid sector: {0}")]
    Sector(String),

    #[error("configuration {0} does not belong to the sector")]
    NotInSector(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("eigensolver did not converge after {iterations} iterations (worst residual {worst_residual:e})")]
    NotConverged {
        iterations: usize,
        worst_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("time step underflow at t = {time} (local error {error:e})")]
    StepUnderflow { time: f64, error: f64 },

    #[error("no pairs at distance {0}")]
    EmptyDistanceClass(usize),

    #[error("no valid hole anchor for the requested displacements")]
    NoAnchor,

    #[error("measurement basis {basis} not valid here: {reason}")]
    Basis { basis: String, reason: String },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
