use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("k-space coordinate out of range [-0.5, 0.5) at sample {index}: {value}")]
    CoordOutOfRange { index: usize, value: f64 },

    #[error("density compensation diverged at iteration {0}")]
    DensityDiverged(usize),

    #[error("calibration data is all zero")]
    ZeroCalibration,

    #[error("non-finite intermediate value in iteration {iteration} of {stage}")]
    Diverged { stage: &'static str, iteration: usize },

    #[error("empty region of interest")]
    EmptyRoi,

    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),

    #[error("missing motion estimate for heartbeat {0}")]
    MissingHeartbeat(usize),

    #[error("format error: {0}")]
    Format(#[from] crate::io::FormatError),

    #[error("weights error: {0}")]
    Weights(#[from] crate::unrolled::WeightsError),

    #[error("scene error: {0}")]
    Scene(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidConfig(msg()))
    }
}
