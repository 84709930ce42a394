//! Joint estimation of the classifier `f(x) = Pr(y=1|x)` and the propensity
//! model `e(x_e) = Pr(s=1|y=1,x_e)` by expectation-maximization.
//!
//! The propensity model only sees the propensity attributes `x_e`; this is
//! what makes the two models identifiable from PU data.
//!
//! * E-step: `yhat_i = s_i + (1 - s_i) f(x_i)(1 - e(x_i)) / (1 - f(x_i) e(x_i))`.
//! * M-step: `f` is fit on every row twice, as a positive with weight `yhat`
//!   and as a negative with weight `1 - yhat`; `e` is fit on every row once,
//!   with target `s` and weight `yhat`.
//!
//! Both M-step fits start from the previous models and only accept descent
//! steps, so with unpenalized M-step fits (the default) the observed-data
//! log likelihood never decreases.

use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::glm::{self, TrainConfig, WeightedExample};
use crate::types::{LinearModel, PuDataset};
use crate::weighting::{self, DEFAULT_E_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    pub loglik_rel_tol: f64,
    /// Number of recent iterations the propensity slope is fit over.
    pub slope_window: usize,
    pub slope_tol: f64,
    /// Optimizer settings for the M-step fits and the initial balanced fit.
    pub m_step: TrainConfig,
    pub warm_start: bool,
    /// Retrain the classifier by propensity-weighted ERM with the learned
    /// propensity model once EM stops.
    pub retrain_after: bool,
    pub retrain: TrainConfig,
    pub e_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            loglik_rel_tol: 1e-6,
            slope_window: 10,
            slope_tol: 1e-4,
            m_step: TrainConfig::default().with_l2(0.0),
            warm_start: true,
            retrain_after: true,
            retrain: TrainConfig::default(),
            e_floor: DEFAULT_E_FLOOR,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        if self.slope_window < 2 {
            return Err(Error::InvalidArgument("slope_window must be at least 2".into()));
        }
        if !(self.loglik_rel_tol > 0.0 && self.slope_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        self.m_step.validate()?;
        self.retrain.validate()
    }
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub classifier: LinearModel,
    pub propensity: LinearModel,
    pub yhat: Array1<f64>,
    pub loglik: f64,
    pub iteration: usize,
    /// Propensity predictions for every row over the most recent iterations.
    pub propensity_history: VecDeque<Array1<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub mean_yhat: f64,
    pub mean_e: f64,
    /// Mean absolute propensity slope; NaN until the window is full.
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    /// Final classifier (retrained when `retrain_after` is set).
    pub classifier: LinearModel,
    /// Classifier as learned by EM itself.
    pub em_classifier: LinearModel,
    pub propensity: LinearModel,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
    pub iterations: usize,
}

/// Posterior probability of the positive class for one row.
pub fn expected_positive(s: u8, f: f64, e: f64) -> f64 {
    if s == 1 {
        1.0
    } else {
        f * (1.0 - e) / (1.0 - f * e)
    }
}

fn check_propensity_attrs(pu: &PuDataset) -> Result<Array2<f64>> {
    if pu.propensity_attr_indices().is_empty() {
        return Err(Error::InvalidArgument(
            "EM needs at least one propensity attribute".into(),
        ));
    }
    pu.propensity_features()
}

fn predictions(
    f: &LinearModel,
    e: &LinearModel,
    pu: &PuDataset,
    prob_clip: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let xe = check_propensity_attrs(pu)?;
    let pf = glm::predict_proba(f, pu.features(), prob_clip)?;
    let pe = glm::predict_proba(e, xe.view(), prob_clip)?;
    Ok((pf, pe))
}

pub fn e_step(f: &LinearModel, e: &LinearModel, pu: &PuDataset, config: &EmConfig) -> Result<Array1<f64>> {
    let (pf, pe) = predictions(f, e, pu, config.m_step.prob_clip)?;
    Ok(Array1::from_iter(
        pu.observed()
            .iter()
            .zip(pf.iter().zip(pe.iter()))
            .map(|(&s, (&f, &e))| expected_positive(s, f, e)),
    ))
}

/// Observed-data log likelihood `sum_i s ln(f e) + (1 - s) ln(1 - f e)`.
pub fn loglikelihood(f: &LinearModel, e: &LinearModel, pu: &PuDataset, config: &EmConfig) -> Result<f64> {
    let (pf, pe) = predictions(f, e, pu, config.m_step.prob_clip)?;
    let mut total = 0.0;
    for (&s, (&f, &e)) in pu.observed().iter().zip(pf.iter().zip(pe.iter())) {
        let p = f * e;
        total += if s == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    Ok(total)
}

fn check_yhat(yhat: &[f64], pu: &PuDataset) -> Result<()> {
    if yhat.len() != pu.n_rows() {
        return Err(Error::LengthMismatch {
            what: "yhat",
            expected: pu.n_rows(),
            found: yhat.len(),
        });
    }
    if let Some(bad) = yhat.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("yhat value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// M-step on a row-weighted dataset. Each row `i` counts `row_weights[i]`
/// times (all rows count once when `None`). Row weights let a finite grid
/// stand in for a population with known expected frequencies.
pub fn m_step_weighted(
    yhat: &[f64],
    pu: &PuDataset,
    row_weights: Option<&[f64]>,
    config: &EmConfig,
    warm: Option<(&LinearModel, &LinearModel)>,
) -> Result<(LinearModel, LinearModel)> {
    check_yhat(yhat, pu)?;
    if let Some(rw) = row_weights {
        if rw.len() != pu.n_rows() {
            return Err(Error::LengthMismatch {
                what: "row weights",
                expected: pu.n_rows(),
                found: rw.len(),
            });
        }
    }
    let xe = check_propensity_attrs(pu)?;
    if yhat.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument(
            "all expected positive probabilities are zero; the propensity model cannot be fit".into(),
        ));
    }
    let rw = |i: usize| row_weights.map_or(1.0, |r| r[i]);

    let mut f_examples = Vec::with_capacity(2 * pu.n_rows());
    for (i, &y) in yhat.iter().enumerate() {
        f_examples.push(WeightedExample::new(pu.row(i), 1, rw(i) * y));
        f_examples.push(WeightedExample::new(pu.row(i), 0, rw(i) * (1.0 - y)));
    }
    let e_examples: Vec<_> = yhat
        .iter()
        .zip(pu.observed())
        .enumerate()
        .map(|(i, (&y, &s))| WeightedExample::new(xe.row(i), s, rw(i) * y))
        .collect();

    let (f_init, e_init) = match warm {
        Some((f, e)) if config.warm_start => (Some(f), Some(e)),
        _ => (None, None),
    };
    let f = glm::fit_weighted(&f_examples, &config.m_step, f_init)?;
    let e = glm::fit_weighted(&e_examples, &config.m_step, e_init)?;
    Ok((f, e))
}

pub fn m_step(
    yhat: &[f64],
    pu: &PuDataset,
    config: &EmConfig,
    warm: Option<(&LinearModel, &LinearModel)>,
) -> Result<(LinearModel, LinearModel)> {
    m_step_weighted(yhat, pu, None, config, warm)
}

/// Starting point: a class-balanced model of `s` serves as the classifier,
/// and the propensity model is fit with the resulting positive-class
/// probabilities as weights.
pub fn initialize(pu: &PuDataset, config: &EmConfig) -> Result<EmState> {
    config.validate()?;
    let xe = check_propensity_attrs(pu)?;
    if pu.labeled_count() == 0 {
        return Err(Error::NoLabeledRows);
    }
    let f0 = glm::balanced_fit(pu.features(), pu.observed(), &config.m_step)?;
    let pf = glm::predict_proba(&f0, pu.features(), config.m_step.prob_clip)?;
    let yhat = Array1::from_iter(
        pu.observed()
            .iter()
            .zip(pf.iter())
            .map(|(&s, &f)| if s == 1 { 1.0 } else { f }),
    );
    let e_examples: Vec<_> = yhat
        .iter()
        .zip(pu.observed())
        .enumerate()
        .map(|(i, (&y, &s))| WeightedExample::new(xe.row(i), s, y))
        .collect();
    let e0 = glm::fit_weighted(&e_examples, &config.m_step, None)?;
    let loglik = loglikelihood(&f0, &e0, pu, config)?;
    let mut history = VecDeque::with_capacity(config.slope_window);
    history.push_back(glm::predict_proba(&e0, xe.view(), config.m_step.prob_clip)?);
    Ok(EmState {
        classifier: f0,
        propensity: e0,
        yhat,
        loglik,
        iteration: 0,
        propensity_history: history,
    })
}

/// Mean over rows of the absolute least-squares slope of each row's
/// propensity prediction against the iteration index.
pub fn mean_abs_slope(history: &VecDeque<Array1<f64>>) -> f64 {
    let k = history.len();
    if k < 2 {
        return f64::NAN;
    }
    let t_mean = (k - 1) as f64 / 2.0;
    let denom: f64 = (0..k).map(|t| (t as f64 - t_mean).powi(2)).sum();
    let n = history[0].len();
    if n == 0 {
        return 0.0;
    }
    let mut numer = Array1::<f64>::zeros(n);
    for (t, preds) in history.iter().enumerate() {
        numer.scaled_add(t as f64 - t_mean, preds);
    }
    numer.iter().map(|v| (v / denom).abs()).sum::<f64>() / n as f64
}

fn trace_record(state: &EmState, mean_e: f64, slope: f64) -> TraceRecord {
    TraceRecord {
        iteration: state.iteration,
        loglik: state.loglik,
        mean_yhat: state.yhat.mean().unwrap_or(f64::NAN),
        mean_e,
        slope,
    }
}

/// Iterate E- and M-steps until both the log likelihood and the propensity
/// predictions have settled, or `max_iters` is reached.
pub fn run_em(pu: &PuDataset, config: &EmConfig) -> Result<EmOutcome> {
    let mut state = initialize(pu, config)?;
    let xe = pu.propensity_features()?;
    let mean_of = |a: &Array1<f64>| a.mean().unwrap_or(f64::NAN);
    let mut trace = vec![trace_record(
        &state,
        mean_of(state.propensity_history.back().expect("initial predictions")),
        f64::NAN,
    )];
    let mut converged = false;

    while state.iteration < config.max_iters {
        let yhat = e_step(&state.classifier, &state.propensity, pu, config)?;
        let (f, e) = m_step(
            yhat.as_slice().expect("contiguous"),
            pu,
            config,
            Some((&state.classifier, &state.propensity)),
        )?;
        let loglik = loglikelihood(&f, &e, pu, config)?;
        let pe = glm::predict_proba(&e, xe.view(), config.m_step.prob_clip)?;
        let mean_e = mean_of(&pe);
        if state.propensity_history.len() == config.slope_window {
            state.propensity_history.pop_front();
        }
        state.propensity_history.push_back(pe);
        let slope = if state.propensity_history.len() == config.slope_window {
            mean_abs_slope(&state.propensity_history)
        } else {
            f64::NAN
        };
        let rel_improvement = (loglik - state.loglik) / state.loglik.abs().max(f64::MIN_POSITIVE);

        state.classifier = f;
        state.propensity = e;
        state.yhat = yhat;
        state.loglik = loglik;
        state.iteration += 1;
        trace.push(trace_record(&state, mean_e, slope));

        if rel_improvement < config.loglik_rel_tol && slope < config.slope_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM stopped after {} iterations without converging", state.iteration);
    }

    let em_classifier = state.classifier.clone();
    let classifier = if config.retrain_after {
        let e_hat = glm::predict_proba(&state.propensity, xe.view(), config.m_step.prob_clip)?;
        weighting::train_pw_classifier(
            pu,
            e_hat.as_slice().expect("contiguous"),
            config.e_floor,
            &config.retrain,
        )?
    } else {
        em_classifier.clone()
    };
    Ok(EmOutcome {
        classifier,
        em_classifier,
        propensity: state.propensity,
        trace,
        converged,
        iterations: state.iteration,
    })
}

/// Propensity predictions of `model` for the rows of `features`, using the
/// designated propensity attribute columns.
pub fn predict_propensity(
    model: &LinearModel,
    features: ArrayView2<'_, f64>,
    propensity_attr_indices: &[usize],
    prob_clip: f64,
) -> Result<Array1<f64>> {
    if let Some(&bad) = propensity_attr_indices.iter().find(|&&j| j >= features.ncols()) {
        return Err(Error::InvalidArgument(format!(
            "propensity attribute index {bad} out of range"
        )));
    }
    let xe = features.select(ndarray::Axis(1), propensity_attr_indices);
    glm::predict_proba(model, xe.view(), prob_clip)
}

/// Line-delimited trace: a header, then one tab-separated record per
/// iteration.
pub fn trace_to_text(trace: &[TraceRecord]) -> String {
    let mut out = String::from("iteration\tloglik\tmean_yhat\tmean_e\tslope\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.iteration, r.loglik, r.mean_yhat, r.mean_e, r.slope
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn expected_positive_examples() {
        assert_eq!(expected_positive(1, 0.2, 0.9), 1.0);
        assert!(expected_positive(0, 0.5, 1.0 - 1e-6) < 1e-5);
        assert_abs_diff_eq!(expected_positive(0, 0.5, 0.5), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn e_step_is_monotone_in_f_and_e() {
        let grid: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        for &e in &grid {
            for w in grid.windows(2) {
                assert!(expected_positive(0, w[1], e) > expected_positive(0, w[0], e));
            }
        }
        for &f in &grid {
            for w in grid.windows(2) {
                assert!(expected_positive(0, f, w[1]) < expected_positive(0, f, w[0]));
            }
        }
    }

    #[test]
    fn slope_of_linear_sequences() {
        let mut h = VecDeque::new();
        for t in 0..5 {
            h.push_back(array![0.1 * t as f64, 0.5, 1.0 - 0.3 * t as f64]);
        }
        assert_abs_diff_eq!(mean_abs_slope(&h), (0.1 + 0.0 + 0.3) / 3.0, epsilon = 1e-12);
        let single: VecDeque<_> = std::iter::once(array![1.0]).collect();
        assert!(mean_abs_slope(&single).is_nan());
    }

    #[test]
    fn loglikelihood_examples() {
        let config = EmConfig::default();
        let pu = PuDataset::new(array![[0.0, 1.0], [0.0, 0.0], [0.0, 1.0]], vec![1, 0, 0])
            .unwrap()
            .with_propensity_attrs(vec![1]);
        // f = 0.8, e = 0.625, so f * e = 0.5 on every row.
        let f = LinearModel::new(array![0.0, 0.0], glm::logit(0.8));
        let e = LinearModel::new(array![0.0], glm::logit(0.625));
        let ll = loglikelihood(&f, &e, &pu, &config).unwrap();
        assert_abs_diff_eq!(ll, 3.0 * 0.5f64.ln(), epsilon = 1e-12);

        let single = PuDataset::new(array![[0.0, 0.0]], vec![1])
            .unwrap()
            .with_propensity_attrs(vec![1]);
        let e = LinearModel::new(array![0.0], 0.0);
        let ll = loglikelihood(&f, &e, &single, &config).unwrap();
        assert_abs_diff_eq!(ll, 0.4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        let config = EmConfig {
            slope_window: 1,
            ..EmConfig::default()
        };
        assert!(config.validate().is_err());
        assert!(EmConfig::default().validate().is_ok());
    }

    #[test]
    fn m_step_rejects_all_zero_yhat() {
        let pu = PuDataset::new(array![[0.0, 1.0], [0.5, 0.0]], vec![0, 0])
            .unwrap()
            .with_propensity_attrs(vec![1]);
        assert!(m_step(&[0.0, 0.0], &pu, &EmConfig::default(), None).is_err());
    }

    #[test]
    fn initialize_requires_both_labels() {
        let pu = PuDataset::new(array![[0.0, 1.0], [0.5, 0.0]], vec![1, 1])
            .unwrap()
            .with_propensity_attrs(vec![1]);
        assert!(matches!(
            initialize(&pu, &EmConfig::default()),
            Err(Error::SingleClass(_))
        ));
        let pu = PuDataset::new(array![[0.0, 1.0], [0.5, 0.0]], vec![0, 0])
            .unwrap()
            .with_propensity_attrs(vec![1]);
        assert!(matches!(
            initialize(&pu, &EmConfig::default()),
            Err(Error::NoLabeledRows)
        ));
    }

    #[test]
    fn trace_text_has_header_and_rows() {
        let trace = [TraceRecord {
            iteration: 0,
            loglik: -1.5,
            mean_yhat: 0.25,
            mean_e: 0.5,
            slope: f64::NAN,
        }];
        let text = trace_to_text(&trace);
        assert_eq!(text, "iteration\tloglik\tmean_yhat\tmean_e\tslope\n0\t-1.5\t0.25\t0.5\tNaN\n");
    }
}
