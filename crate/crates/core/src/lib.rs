//! Causal discovery for non-stationary multivariate experiment histories,
//! decomposition of the discovered graph into supervised learning tasks,
//! dropout-regularized recurrent surrogates per task, and Monte-Carlo
//! propagation of predictive uncertainty along the graph.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`dataset`]: experiment manifests, CSV time histories, normalization,
//!   calibration/test splits.
//! - [`kernels`]: Gram matrices, HSIC, the kernel conditional independence
//!   test, and the normalized-HSIC direction score.
//! - [`discovery`]: skeleton recovery, edge orientation, consensus
//!   aggregation, and the lagged extension.
//! - [`graphops`]: DAG utilities and decomposition into learning tasks.
//! - [`surrogate`]: gated recurrent regressors trained with dropout.
//! - [`uq`]: prediction ensembles, interval bands, and evaluation statistics.
//! - [`micromech`]: fabric tensors and contact-network graph metrics.
//! - [`semgen`]: synthetic structural-equation-model data for validation.

pub mod dataset;
pub mod discovery;
pub mod graphops;
pub mod kernels;
pub mod micromech;
pub mod semgen;
pub mod surrogate;
pub mod uq;

pub use dataset::{Experiment, ExperimentSet, NodeKind, NodeRole, NodeSchema, Normalizer};
pub use discovery::{CausalGraph, DiscoveryConfig};
pub use graphops::{LearningTask, TaskPlan};
pub use kernels::{DirectionScore, GramMatrix, IndependenceResult};
pub use surrogate::{GruWeights, TrainConfig, TrainedModel};
pub use uq::{EcdfCurve, IntervalBand, PredictionEnsemble};

use thiserror::Error;

/// Error type shared across the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{file}:{line}: {message}")]
    Csv {
        file: String,
        line: u64,
        message: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Derives an independent sub-seed from a base seed and a stream index.
///
/// Two rounds of the splitmix64 finalizer; cheap and collision-resistant
/// enough for seeding per-experiment, per-task, and per-pass RNG streams.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut s = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for _ in 0..2 {
        s = (s ^ (s >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        s = (s ^ (s >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        s ^= s >> 31;
    }
    s
}
