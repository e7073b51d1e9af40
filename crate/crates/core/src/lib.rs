//! Weakly supervised multi-label classification from partial labels.
//!
//! Unobserved labels are assumed negative, which turns the problem into
//! multi-label learning with false negatives. The schemes in [`schemes`]
//! reject or correct the largest losses on unobserved labels so the model
//! stops memorizing those false negatives. The remaining modules provide the
//! data model ([`dataset`]), a small classifier with hand-written gradients
//! ([`model`]), the training loop with memorization tracking ([`trainer`]),
//! average-precision metrics ([`eval`]) and the command line ([`cli`]).

pub mod cli;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod schemes;
pub mod trainer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use dataset::{LabelState, PartialDataset, SyntheticSpec};
pub use eval::{ApResult, PhaseDistribution};
pub use model::{Architecture, Classifier, OptimizerConfig, OptimizerKind, OptimizerState};
pub use schemes::{BatchDecision, Scheme, SchemeConfig};
pub use trainer::{MemorizationTracker, RunReport, TrainConfig};

/// Any error surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Scheme(#[from] schemes::SchemeError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic generator for a `(seed, stream)` pair. Distinct streams give
/// independent sequences from the same user seed.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `⌊fraction · n⌋`, tolerant of representation error in `fraction`
/// (e.g. `0.29 * 100.0 == 28.999999999999996`).
pub(crate) fn floor_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}
