//! Density estimators over summary statistics and parameters: a conditional
//! neural spline flow (sampling and conditional density evaluation) and a
//! block neural autoregressive flow (density evaluation only), both on a
//! standard Gaussian base, plus maximum-likelihood training with early
//! stopping.

mod bnaf;
mod mlp;
mod model_io;
mod spline;
mod spline_flow;
mod standardize;
mod train;

pub use bnaf::{BnafActivation, BnafEvaluator, BnafModel, BnafSpec};
pub use model_io::{load_bnaf, load_spline_flow, save_bnaf, save_spline_flow};
pub use spline::{rq_spline_apply, SplineSegments};
pub use spline_flow::{Context, SplineFlowModel, SplineFlowSpec};
pub use standardize::Standardizer;
pub use train::{
    finite_diff_nll_check, fit_density_estimator, EpochStats, TrainConfig, Trainable,
    TrainingCurve,
};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Log-density of the standard normal at `z`.
pub fn std_normal_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * LN_2PI
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("context required for a conditional flow")]
    ContextRequired,
    #[error("the block autoregressive flow is evaluation-only and cannot be sampled")]
    SampleFromBnaf,
    #[error("dimension {dim} is constant; cannot standardize a degenerate statistic")]
    ConstantDimension { dim: usize },
    #[error("empty data set")]
    EmptyData,
    #[error("spline bin parameters invalid: {reason}")]
    SplineParams { reason: String },
    #[error("training loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {reason}")]
    BadConfig { reason: String },
    #[error("model file corrupt or of unknown format: {reason}")]
    BadModelFile { reason: String },
    #[error(transparent)]
    Autodiff(#[from] rnpe_autodiff::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
