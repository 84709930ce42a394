//! Weighted, L2-regularized logistic regression.
//!
//! Example weights are arbitrary reals: the propensity-weighting scheme adds
//! negatively weighted copies of the labeled examples, so the trainer must
//! cope with objectives that are not convex everywhere. The objective is
//!
//! ```text
//! J(w, b) = sum_i w_i * logloss(t_i, p_i) / sum_i max(w_i, 0) + (lambda / 2) * |w|^2
//! ```
//!
//! with `p_i = sigmoid(x_i . w + b)` clipped to `[prob_clip, 1 - prob_clip]`.
//! The intercept is not penalized. Clipping is applied to the linear score,
//! so the gradient of a clipped example is exactly zero and the analytic
//! gradient is the true gradient of `J`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::types::{LinearModel, OPTIM_CLIP};

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Damped Newton steps, falling back to the gradient direction when the
    /// Hessian is not positive definite.
    Newton,
    /// Plain gradient descent.
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Penalty on the weights. `None` uses `1 / m`, with `m` the number of
    /// examples carrying a strictly positive weight.
    pub l2_strength: Option<f64>,
    /// Initial step of the backtracking line search (halved on failure).
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the max-norm of the gradient is below this value.
    pub grad_tolerance: f64,
    pub prob_clip: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_strength: None,
            learning_rate: 1.0,
            max_epochs: 200,
            grad_tolerance: 1e-9,
            prob_clip: OPTIM_CLIP,
            optimizer: Optimizer::Newton,
        }
    }
}

impl TrainConfig {
    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2_strength = Some(l2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if let Some(l2) = self.l2_strength {
            if !(l2 >= 0.0 && l2.is_finite()) {
                return bad(format!("l2_strength must be nonnegative, got {l2}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !(self.grad_tolerance > 0.0) {
            return bad(format!("grad_tolerance must be positive, got {}", self.grad_tolerance));
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return bad(format!("prob_clip must lie in (0, 0.5), got {}", self.prob_clip));
        }
        Ok(())
    }
}

/// One row of a weighted training set. The weight may be negative.
#[derive(Debug, Clone)]
pub struct WeightedExample<'a> {
    pub features: ArrayView1<'a, f64>,
    pub target: u8,
    pub weight: f64,
}

impl<'a> WeightedExample<'a> {
    pub fn new(features: ArrayView1<'a, f64>, target: u8, weight: f64) -> Self {
        Self {
            features,
            target,
            weight,
        }
    }
}

/// Unit-weight examples for an ordinary supervised fit.
pub fn unit_examples<'a>(features: ArrayView2<'a, f64>, targets: &[u8]) -> Vec<WeightedExample<'a>> {
    targets
        .iter()
        .enumerate()
        .map(move |(i, &t)| WeightedExample::new(features.index_axis_move(ndarray::Axis(0), i), t, 1.0))
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `-ln(sigmoid(z))`, stable for large `|z|`.
fn neg_log_sigmoid(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_dim(model: &LinearModel, cols: usize) -> Result<()> {
    if model.dim() != cols {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: cols,
        });
    }
    Ok(())
}

/// Linear scores `x . w + b`.
pub fn decision_function(model: &LinearModel, features: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_dim(model, features.ncols())?;
    Ok(features.dot(&model.weights) + model.intercept)
}

/// Probabilities `sigmoid(x . w + b)` clipped to `[prob_clip, 1 - prob_clip]`.
pub fn predict_proba(
    model: &LinearModel,
    features: ArrayView2<'_, f64>,
    prob_clip: f64,
) -> Result<Array1<f64>> {
    let z = decision_function(model, features)?;
    Ok(z.mapv(|z| sigmoid(z).clamp(prob_clip, 1.0 - prob_clip)))
}

pub fn predict_row(model: &LinearModel, row: ArrayView1<'_, f64>, prob_clip: f64) -> f64 {
    sigmoid(row.dot(&model.weights) + model.intercept).clamp(prob_clip, 1.0 - prob_clip)
}

/// The weighted objective over a fixed example set, with rows stored in a
/// canonical order so that results do not depend on the input order.
struct Objective {
    x: Array2<f64>,
    targets: Vec<f64>,
    weights: Vec<f64>,
    positive_mass: f64,
    abs_mass: f64,
    lambda: f64,
    z_max: f64,
}

struct Evaluation {
    data_loss: f64,
    value: f64,
    grad: Array1<f64>,
}

fn compare_examples(a: &WeightedExample<'_>, b: &WeightedExample<'_>) -> Ordering {
    a.weight
        .total_cmp(&b.weight)
        .then(a.target.cmp(&b.target))
        .then_with(|| {
            a.features
                .iter()
                .zip(b.features.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

impl Objective {
    fn new(examples: &[WeightedExample<'_>], config: &TrainConfig) -> Result<Self> {
        let dim = examples
            .first()
            .map(|e| e.features.len())
            .ok_or_else(|| Error::InvalidArgument("no training examples".into()))?;
        for ex in examples {
            if ex.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: ex.features.len(),
                });
            }
            if !ex.weight.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite weight {}", ex.weight)));
            }
            if ex.target > 1 {
                return Err(Error::InvalidArgument(format!("target must be 0 or 1, got {}", ex.target)));
            }
        }
        let positive_mass: f64 = examples.iter().map(|e| e.weight.max(0.0)).sum();
        if !(positive_mass > 0.0) {
            return Err(Error::InvalidArgument(
                "total positive example weight must be > 0".into(),
            ));
        }

        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.sort_by(|&a, &b| compare_examples(&examples[a], &examples[b]));

        let mut x = Array2::zeros((examples.len(), dim));
        let mut targets = Vec::with_capacity(examples.len());
        let mut weights = Vec::with_capacity(examples.len());
        for (r, &i) in order.iter().enumerate() {
            x.row_mut(r).assign(&examples[i].features);
            targets.push(f64::from(examples[i].target));
            weights.push(examples[i].weight);
        }
        let positive_mass: f64 = weights.iter().map(|w| w.max(0.0)).sum();
        let abs_mass: f64 = weights.iter().map(|w| w.abs()).sum();
        let lambda = config.l2_strength.unwrap_or_else(|| {
            1.0 / weights.iter().filter(|&&w| w > 0.0).count() as f64
        });
        Ok(Self {
            x,
            targets,
            weights,
            positive_mass,
            abs_mass,
            lambda,
            z_max: logit(1.0 - config.prob_clip),
        })
    }

    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn scores(&self, theta: &Array1<f64>) -> Array1<f64> {
        let d = self.dim();
        self.x.dot(&theta.slice(ndarray::s![..d])) + theta[d]
    }

    fn penalty(&self, theta: &Array1<f64>) -> f64 {
        let d = self.dim();
        0.5 * self.lambda * theta.slice(ndarray::s![..d]).mapv(|v| v * v).sum()
    }

    fn example_loss(&self, t: f64, z: f64) -> f64 {
        let zc = z.clamp(-self.z_max, self.z_max);
        if t == 1.0 {
            neg_log_sigmoid(zc)
        } else {
            neg_log_sigmoid(-zc)
        }
    }

    fn data_loss(&self, z: &Array1<f64>) -> f64 {
        let mut total = 0.0;
        for ((&zi, &t), &w) in z.iter().zip(&self.targets).zip(&self.weights) {
            if w != 0.0 {
                total += w * self.example_loss(t, zi);
            }
        }
        total / self.positive_mass
    }

    fn value(&self, theta: &Array1<f64>) -> f64 {
        self.data_loss(&self.scores(theta)) + self.penalty(theta)
    }

    fn evaluate(&self, theta: &Array1<f64>) -> Evaluation {
        let d = self.dim();
        let z = self.scores(theta);
        let data_loss = self.data_loss(&z);
        let mut grad = Array1::zeros(d + 1);
        for (r, ((&zi, &t), &w)) in z.iter().zip(&self.targets).zip(&self.weights).enumerate() {
            if w == 0.0 || zi.abs() >= self.z_max {
                continue;
            }
            let g = w * (sigmoid(zi) - t) / self.positive_mass;
            grad.slice_mut(ndarray::s![..d]).scaled_add(g, &self.x.row(r));
            grad[d] += g;
        }
        grad.slice_mut(ndarray::s![..d])
            .scaled_add(self.lambda, &theta.slice(ndarray::s![..d]));
        Evaluation {
            data_loss,
            value: data_loss + self.penalty(theta),
            grad,
        }
    }

    fn hessian(&self, theta: &Array1<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let z = self.scores(theta);
        let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
        let mut aug = vec![0.0; d + 1];
        for (r, (&zi, &w)) in z.iter().zip(&self.weights).enumerate() {
            if w == 0.0 || zi.abs() >= self.z_max {
                continue;
            }
            let p = sigmoid(zi);
            let c = w * p * (1.0 - p) / self.positive_mass;
            for (j, v) in self.x.row(r).iter().enumerate() {
                aug[j] = *v;
            }
            aug[d] = 1.0;
            for a in 0..=d {
                let ca = c * aug[a];
                for b in a..=d {
                    h[(a, b)] += ca * aug[b];
                }
            }
        }
        for a in 0..=d {
            if a < d {
                h[(a, a)] += self.lambda;
            }
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        h
    }

    /// Newton direction, damped until the Hessian is positive definite.
    fn newton_direction(&self, theta: &Array1<f64>, grad: &Array1<f64>) -> Option<Array1<f64>> {
        let h = self.hessian(theta);
        let g = DVector::from_iterator(grad.len(), grad.iter().map(|v| -v));
        let scale = h.diagonal().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        let mut damping = 0.0;
        for _ in 0..12 {
            let mut hd = h.clone();
            for i in 0..hd.nrows() {
                hd[(i, i)] += damping;
            }
            if let Some(chol) = hd.cholesky() {
                let step = chol.solve(&g);
                let dir = Array1::from_iter(step.iter().copied());
                if dir.iter().all(|v| v.is_finite()) && dir.dot(grad) < 0.0 {
                    return Some(dir);
                }
            }
            damping = if damping == 0.0 { 1e-8 * scale } else { damping * 10.0 };
        }
        None
    }
}

/// Outcome of a fit, including the loss after every accepted epoch.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: LinearModel,
    /// Objective value at the initial parameters, then after each epoch.
    pub loss_history: Vec<f64>,
    pub converged: bool,
    pub epochs: usize,
}

/// Weighted log loss (plus the L2 term) of `model` on `examples`.
pub fn weighted_log_loss(
    model: &LinearModel,
    examples: &[WeightedExample<'_>],
    config: &TrainConfig,
) -> Result<f64> {
    config.validate()?;
    let objective = Objective::new(examples, config)?;
    check_dim(model, objective.dim())?;
    Ok(objective.value(&pack(model)))
}

/// Gradient of [`weighted_log_loss`] with respect to `(weights, intercept)`.
pub fn weighted_log_loss_gradient(
    model: &LinearModel,
    examples: &[WeightedExample<'_>],
    config: &TrainConfig,
) -> Result<Array1<f64>> {
    config.validate()?;
    let objective = Objective::new(examples, config)?;
    check_dim(model, objective.dim())?;
    Ok(objective.evaluate(&pack(model)).grad)
}

fn pack(model: &LinearModel) -> Array1<f64> {
    let mut theta = Array1::zeros(model.dim() + 1);
    theta.slice_mut(ndarray::s![..model.dim()]).assign(&model.weights);
    theta[model.dim()] = model.intercept;
    theta
}

fn unpack(theta: &Array1<f64>) -> LinearModel {
    let d = theta.len() - 1;
    LinearModel::new(theta.slice(ndarray::s![..d]).to_owned(), theta[d])
}

pub fn fit_weighted(
    examples: &[WeightedExample<'_>],
    config: &TrainConfig,
    init: Option<&LinearModel>,
) -> Result<LinearModel> {
    fit_weighted_report(examples, config, init).map(|r| r.model)
}

/// Minimize the weighted objective from `init` (zeros when absent).
///
/// Every accepted step satisfies the Armijo condition, so the objective never
/// increases from one epoch to the next.
pub fn fit_weighted_report(
    examples: &[WeightedExample<'_>],
    config: &TrainConfig,
    init: Option<&LinearModel>,
) -> Result<FitReport> {
    config.validate()?;
    let objective = Objective::new(examples, config)?;
    let d = objective.dim();
    let mut theta = match init {
        Some(model) => {
            check_dim(model, d)?;
            pack(model)
        }
        None => Array1::zeros(d + 1),
    };
    let guard = -(-config.prob_clip.ln()) * objective.abs_mass / objective.positive_mass;

    let mut eval = objective.evaluate(&theta);
    let mut history = vec![eval.value];
    let mut converged = false;
    let mut epochs = 0;
    for epoch in 0..config.max_epochs {
        if !eval.value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if eval.data_loss < guard {
            return Err(Error::Diverged {
                loss: eval.data_loss,
                guard,
            });
        }
        if eval.grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) <= config.grad_tolerance {
            converged = true;
            break;
        }
        let direction = match config.optimizer {
            Optimizer::Newton => objective
                .newton_direction(&theta, &eval.grad)
                .unwrap_or_else(|| -&eval.grad),
            Optimizer::GradientDescent => -&eval.grad,
        };
        let slope = direction.dot(&eval.grad);
        let mut step = config.learning_rate;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = &theta + &(&direction * step);
            let value = objective.value(&candidate);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            if value <= eval.value + ARMIJO_C * step * slope {
                accepted = Some((candidate, value));
                break;
            }
            step *= 0.5;
        }
        // Without a representable decrease we are at a stationary point up
        // to rounding.
        let Some((next, value)) = accepted else {
            break;
        };
        if value >= eval.value {
            break;
        }
        theta = next;
        eval = objective.evaluate(&theta);
        history.push(eval.value);
        epochs = epoch + 1;
    }
    if !converged {
        converged = eval.grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) <= config.grad_tolerance;
    }
    log::debug!(
        "fit: {} examples, {epochs} epochs, converged {converged}, objective {}",
        objective.weights.len(),
        eval.value
    );
    Ok(FitReport {
        model: unpack(&theta),
        loss_history: history,
        converged,
        epochs,
    })
}

/// Ordinary (unit weight) supervised fit.
pub fn fit_supervised(
    features: ArrayView2<'_, f64>,
    targets: &[u8],
    config: &TrainConfig,
) -> Result<LinearModel> {
    if features.nrows() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "targets",
            expected: features.nrows(),
            found: targets.len(),
        });
    }
    fit_weighted(&unit_examples(features, targets), config, None)
}

/// Fit with class-balancing weights `n / (2 * n_t)` for each example of
/// class `t`.
pub fn balanced_fit(
    features: ArrayView2<'_, f64>,
    targets: &[u8],
    config: &TrainConfig,
) -> Result<LinearModel> {
    if features.nrows() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "targets",
            expected: features.nrows(),
            found: targets.len(),
        });
    }
    let n = targets.len() as f64;
    let n_pos = targets.iter().filter(|&&t| t == 1).count();
    let n_neg = targets.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("balanced fit needs both target values".into()));
    }
    let w_pos = n / (2.0 * n_pos as f64);
    let w_neg = n / (2.0 * n_neg as f64);
    let examples: Vec<_> = features
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| WeightedExample::new(row, t, if t == 1 { w_pos } else { w_neg }))
        .collect();
    fit_weighted(&examples, config, None)
}

/// Flat text record: dimension, weights, intercept. Values use 17
/// significant digits so that parsing recovers them exactly.
pub fn model_to_text(model: &LinearModel) -> String {
    let weights: Vec<String> = model.weights.iter().map(|w| format!("{w:.16e}")).collect();
    format!(
        "dimension\t{}\nweights\t{}\nintercept\t{:.16e}\n",
        model.dim(),
        weights.join("\t"),
        model.intercept
    )
}

pub fn model_from_text(text: &str) -> Result<LinearModel> {
    let mut dim = None;
    let mut weights = None;
    let mut intercept = None;
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split('\t');
        let key = fields.next().unwrap_or("");
        let values: Vec<&str> = fields.filter(|f| !f.is_empty()).collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::parse(i + 1, format!("bad number {s:?}")))
        };
        match key {
            "dimension" => {
                let v = values.first().ok_or_else(|| Error::parse(i + 1, "missing dimension"))?;
                dim = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::parse(i + 1, format!("bad dimension {v:?}")))?,
                );
            }
            "weights" => weights = Some(values.iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?),
            "intercept" => {
                let v = values.first().ok_or_else(|| Error::parse(i + 1, "missing intercept"))?;
                intercept = Some(parse(v)?);
            }
            "" => {}
            _ => {}
        }
    }
    let dim = dim.ok_or_else(|| Error::parse(0, "missing dimension record"))?;
    let weights = weights.ok_or_else(|| Error::parse(0, "missing weights record"))?;
    let intercept = intercept.ok_or_else(|| Error::parse(0, "missing intercept record"))?;
    if weights.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: weights.len(),
        });
    }
    Ok(LinearModel::new(Array1::from(weights), intercept))
}
