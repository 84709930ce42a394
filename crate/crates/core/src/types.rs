//! Domain types shared across the toolkit.
//!
//! Binary labels (`y`, `s`) are stored as `u8` values in `{0, 1}` so they can
//! enter the risk formulas directly. Feature matrices are dense, row-major
//! `ndarray` matrices with one row per instance.

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

fn check_binary(what: &'static str, values: &[u8]) -> Result<()> {
    if let Some(bad) = values.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidArgument(format!(
            "{what} must be 0 or 1, found {bad}"
        )));
    }
    Ok(())
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::LengthMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// Fully labeled data: the ground truth a PU dataset is simulated from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    classes: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, classes: Vec<u8>) -> Result<Self> {
        check_len("classes", features.nrows(), classes.len())?;
        check_binary("class labels", &classes)?;
        Ok(Self { features, classes })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.features.ncols()
    }

    pub fn positive_count(&self) -> usize {
        self.classes.iter().filter(|&&y| y == 1).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.positive_count();
        pos > 0 && pos < self.n_rows()
    }

    /// Number of feature values outside the preprocessed range `[-1, 1]`.
    pub fn out_of_range_count(&self) -> usize {
        self.features.iter().filter(|v| !(-1.0..=1.0).contains(*v)).count()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            classes: rows.iter().map(|&i| self.classes[i]).collect(),
        }
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<u8>) {
        (self.features, self.classes)
    }
}

/// Positive-unlabeled data: features plus the observed labeling `s`.
///
/// The hidden classes and true propensity scores are only known for
/// simulated data and are used for evaluation, never for training PU
/// methods.
///
/// Construction checks shapes only. Semantic invariants (only positives are
/// labeled, propensities in `(0, 1]`, valid propensity attribute indices)
/// are reported by [`validate_pu`].
#[derive(Debug, Clone, PartialEq)]
pub struct PuDataset {
    features: Array2<f64>,
    observed: Vec<u8>,
    hidden_classes: Option<Vec<u8>>,
    true_propensity: Option<Vec<f64>>,
    propensity_attr_indices: Vec<usize>,
}

impl PuDataset {
    pub fn new(features: Array2<f64>, observed: Vec<u8>) -> Result<Self> {
        check_len("observed labels", features.nrows(), observed.len())?;
        check_binary("observed labels", &observed)?;
        Ok(Self {
            features,
            observed,
            hidden_classes: None,
            true_propensity: None,
            propensity_attr_indices: Vec::new(),
        })
    }

    pub fn with_hidden_classes(mut self, classes: Vec<u8>) -> Result<Self> {
        check_len("hidden classes", self.n_rows(), classes.len())?;
        check_binary("hidden classes", &classes)?;
        self.hidden_classes = Some(classes);
        Ok(self)
    }

    pub fn with_true_propensity(mut self, propensity: Vec<f64>) -> Result<Self> {
        check_len("true propensity", self.n_rows(), propensity.len())?;
        self.true_propensity = Some(propensity);
        Ok(self)
    }

    pub fn with_propensity_attrs(mut self, indices: Vec<usize>) -> Self {
        self.propensity_attr_indices = indices;
        self
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn observed(&self) -> &[u8] {
        &self.observed
    }

    pub fn hidden_classes(&self) -> Option<&[u8]> {
        self.hidden_classes.as_deref()
    }

    pub fn true_propensity(&self) -> Option<&[f64]> {
        self.true_propensity.as_deref()
    }

    pub fn propensity_attr_indices(&self) -> &[usize] {
        &self.propensity_attr_indices
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.features.ncols()
    }

    pub fn labeled_count(&self) -> usize {
        self.observed.iter().filter(|&&s| s == 1).count()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// The propensity attribute columns `x_e`, in the designated order.
    pub fn propensity_features(&self) -> Result<Array2<f64>> {
        if let Some(&bad) = self
            .propensity_attr_indices
            .iter()
            .find(|&&j| j >= self.n_cols())
        {
            return Err(Error::InvalidArgument(format!(
                "propensity attribute index {bad} out of range for {} columns",
                self.n_cols()
            )));
        }
        Ok(self.features.select(Axis(1), &self.propensity_attr_indices))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let pick_u8 = |v: &Vec<u8>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            features: self.features.select(Axis(0), rows),
            observed: pick_u8(&self.observed),
            hidden_classes: self.hidden_classes.as_ref().map(pick_u8),
            true_propensity: self
                .true_propensity
                .as_ref()
                .map(|e| rows.iter().map(|&i| e[i]).collect()),
            propensity_attr_indices: self.propensity_attr_indices.clone(),
        }
    }

    /// The supervised view of this dataset, if the hidden classes are known.
    pub fn to_labeled(&self) -> Result<LabeledDataset> {
        let classes = self
            .hidden_classes
            .clone()
            .ok_or_else(|| Error::MissingData("hidden classes".into()))?;
        LabeledDataset::new(self.features.clone(), classes)
    }
}

/// One broken invariant of a [`PuDataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LabeledNegative { row: usize },
    PropensityNotPositive { row: usize, value: f64 },
    PropensityAboveOne { row: usize, value: f64 },
    PropensityAttrOutOfRange { index: usize, n_cols: usize },
    DuplicatePropensityAttr { index: usize },
    NonFiniteFeature { row: usize, col: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LabeledNegative { row } => {
                write!(f, "positive-only labeling violated at row {row}: s=1 but y=0")
            }
            Violation::PropensityNotPositive { row, value } => {
                write!(f, "propensity must be > 0 (row {row} has {value})")
            }
            Violation::PropensityAboveOne { row, value } => {
                write!(f, "propensity must be <= 1 (row {row} has {value})")
            }
            Violation::PropensityAttrOutOfRange { index, n_cols } => {
                write!(f, "propensity attribute index {index} out of range for {n_cols} columns")
            }
            Violation::DuplicatePropensityAttr { index } => {
                write!(f, "propensity attribute index {index} listed more than once")
            }
            Violation::NonFiniteFeature { row, col } => {
                write!(f, "non-finite feature value at row {row}, column {col}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Collect every invariant violation of `dataset`. A valid dataset yields an
/// empty report.
pub fn validate_pu(dataset: &PuDataset) -> ValidationReport {
    let mut violations = Vec::new();

    for ((row, col), v) in dataset.features.indexed_iter() {
        if !v.is_finite() {
            violations.push(Violation::NonFiniteFeature { row, col });
        }
    }
    if let Some(classes) = dataset.hidden_classes() {
        for (row, (&s, &y)) in dataset.observed.iter().zip(classes).enumerate() {
            if s == 1 && y == 0 {
                violations.push(Violation::LabeledNegative { row });
            }
        }
    }
    if let Some(e) = dataset.true_propensity() {
        for (row, &value) in e.iter().enumerate() {
            if !(value > 0.0) {
                violations.push(Violation::PropensityNotPositive { row, value });
            } else if value > 1.0 {
                violations.push(Violation::PropensityAboveOne { row, value });
            }
        }
    }
    let mut seen = HashSet::new();
    for &index in &dataset.propensity_attr_indices {
        if index >= dataset.n_cols() {
            violations.push(Violation::PropensityAttrOutOfRange {
                index,
                n_cols: dataset.n_cols(),
            });
        }
        if !seen.insert(index) {
            violations.push(Violation::DuplicatePropensityAttr { index });
        }
    }
    ValidationReport { violations }
}

/// A linear model `sigmoid(x . weights + intercept)`, used both as the
/// classifier and as the propensity model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Array1<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn new(weights: Array1<f64>, intercept: f64) -> Self {
        Self { weights, intercept }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(Array1::zeros(dim), 0.0)
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostKind {
    Mae,
    Mse,
    LogLoss,
}

impl CostKind {
    pub const ALL: [CostKind; 3] = [CostKind::Mae, CostKind::Mse, CostKind::LogLoss];

    pub fn name(self) -> &'static str {
        match self {
            CostKind::Mae => "mae",
            CostKind::Mse => "mse",
            CostKind::LogLoss => "log_loss",
        }
    }
}

/// Clip used when a cost is only evaluated.
pub const EVAL_CLIP: f64 = 1e-12;
/// Clip used for losses inside an optimizer; tighter clipping destabilizes
/// gradients when some weights are negative.
pub const OPTIM_CLIP: f64 = 1e-6;

/// A per-example cost `delta_y(yhat)` with predictions clipped to
/// `[clip_epsilon, 1 - clip_epsilon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSpec {
    kind: CostKind,
    clip_epsilon: f64,
}

impl CostSpec {
    pub fn new(kind: CostKind, clip_epsilon: f64) -> Result<Self> {
        if !(clip_epsilon > 0.0 && clip_epsilon < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "clip_epsilon must lie in (0, 0.5), got {clip_epsilon}"
            )));
        }
        Ok(Self { kind, clip_epsilon })
    }

    pub fn evaluation(kind: CostKind) -> Self {
        Self {
            kind,
            clip_epsilon: EVAL_CLIP,
        }
    }

    pub fn optimization(kind: CostKind) -> Self {
        Self {
            kind,
            clip_epsilon: OPTIM_CLIP,
        }
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn clip_epsilon(&self) -> f64 {
        self.clip_epsilon
    }

    /// Largest absolute cost over the clipped prediction range.
    pub fn delta_max(&self) -> f64 {
        match self.kind {
            CostKind::Mae | CostKind::Mse => 1.0,
            CostKind::LogLoss => -self.clip_epsilon.ln(),
        }
    }

    /// Bounds for log loss only exist because of clipping.
    pub fn bound_is_clip_dependent(&self) -> bool {
        self.kind == CostKind::LogLoss
    }

    /// `delta_y(yhat)`. Fails if `yhat` is outside `(0, 1)`; otherwise the
    /// prediction is clipped before the cost is evaluated.
    pub fn delta(&self, y: u8, yhat: f64) -> Result<f64> {
        if !(yhat > 0.0 && yhat < 1.0) {
            return Err(Error::PredictionOutOfRange(yhat));
        }
        let p = yhat.clamp(self.clip_epsilon, 1.0 - self.clip_epsilon);
        let y = if y == 1 { 1.0 } else { 0.0 };
        Ok(match self.kind {
            CostKind::Mae => (y - p).abs(),
            CostKind::Mse => (y - p) * (y - p),
            CostKind::LogLoss => {
                if y == 1.0 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            }
        })
    }
}

/// Parameters of the concentration bounds: confidence `1 - eta`, the size of
/// the (finite) hypothesis space and the sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSpec {
    eta: f64,
    hypothesis_count: u64,
    sample_size: u64,
}

impl BoundSpec {
    pub fn new(eta: f64, hypothesis_count: u64, sample_size: u64) -> Result<Self> {
        // eta = 1 is admitted so that ln(|H| / eta) can vanish for |H| = 1.
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidArgument(format!("eta must lie in (0, 1], got {eta}")));
        }
        if hypothesis_count == 0 || sample_size == 0 {
            return Err(Error::InvalidArgument(
                "hypothesis_count and sample_size must be positive".into(),
            ));
        }
        Ok(Self {
            eta,
            hypothesis_count,
            sample_size,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn hypothesis_count(&self) -> u64 {
        self.hypothesis_count
    }

    pub fn sample_size(&self) -> u64 {
        self.sample_size
    }
}
