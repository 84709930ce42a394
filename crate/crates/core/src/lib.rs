//! Positive-unlabeled (PU) learning when the labeled positives are a biased
//! sample of all positives.
//!
//! The labeling mechanism is described by a propensity score
//! `e(x) = Pr(s = 1 | y = 1, x)`. When the propensity scores are known, the
//! [`weighting`] module turns each labeled example into a positive/negative
//! pair with weights `1/e` and `1 - 1/e`, which makes the weighted empirical
//! risk an unbiased estimate of the supervised risk (see [`risk`]). When they
//! are unknown but depend only on a few designated *propensity attributes*,
//! [`sar_em`] learns the classifier and the propensity model jointly by
//! expectation-maximization.
//!
//! The remaining modules provide the baselines ([`scar_baselines`]), a data
//! simulator ([`simulate`]), CSV and container I/O ([`dataio`]), evaluation
//! and the benchmark harness ([`metrics`], [`bench`]) and the on-demand
//! theory checks used by the command-line `verify` command ([`verify`]).

pub mod bench;
pub mod dataio;
pub mod error;
pub mod glm;
pub mod metrics;
pub mod risk;
pub mod sar_em;
pub mod scar_baselines;
pub mod simulate;
pub mod types;
pub mod verify;
pub mod weighting;

pub use error::{Error, Result};
pub use glm::{TrainConfig, WeightedExample};
pub use types::{
    BoundSpec, CostKind, CostSpec, LabeledDataset, LinearModel, PuDataset, ValidationReport,
    Violation,
};
