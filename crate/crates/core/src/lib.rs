//! Fair mapping of tabular records onto a privileged-group distribution.
//!
//! The crate trains a generator that transports records of the protected
//! groups onto the distribution of a chosen privileged group while a
//! discriminator tries to recover the sensitive attribute. Around that core it
//! provides the encoding pipeline, a small reverse-mode dense network, the
//! external classifiers used for auditing, the protection/utility/fairness
//! metrics, Sinkhorn divergences, a quantile-repair baseline and the Pareto
//! evaluation harness.
//!
//! Group indices are zero-based throughout the API: group `0` is always the
//! privileged group.

pub mod baselines;
pub mod classifiers;
pub mod data;
pub mod eval;
pub mod mapping;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sinkhorn;

pub use data::{Dataset, EncodedMatrix, Encoder};
pub use mapping::{MappingEnsemble, Mode, TrainConfig};
pub use nn::DenseNet;



/// Index of the privileged group.
pub const PRIVILEGED: usize = 0;
