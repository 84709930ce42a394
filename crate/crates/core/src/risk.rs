//! Risk estimators for PU data and their concentration bounds.
//!
//! Given predictions `yhat`, the true risk is the mean cost
//! `y * delta_1(yhat) + (1 - y) * delta_0(yhat)`. On PU data `y` is not
//! observed; the propensity-weighted estimator replaces it with the labeling
//! `s` and the propensity scores `e`:
//!
//! ```text
//! R_pw = 1/n * sum_i s_i * (delta_1 / e_i + (1 - 1/e_i) * delta_0) + (1 - s_i) * delta_0
//! ```
//!
//! which is unbiased when `e` is the true propensity. Its value can be
//! negative because the weights `1 - 1/e` are.

use crate::error::{Error, Result};
use crate::types::{BoundSpec, CostSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    True,
    PropensityWeighted,
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskReport {
    pub value: f64,
    pub estimator: EstimatorKind,
    pub cost: CostSpec,
    pub n: usize,
}

fn check_lengths(n: usize, others: &[(&'static str, usize)]) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("risk needs at least one example".into()));
    }
    for &(what, len) in others {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    Ok(())
}

fn check_propensities(e: &[f64]) -> Result<()> {
    for (row, &value) in e.iter().enumerate() {
        if !(value > 0.0 && value <= 1.0) {
            return Err(Error::InvalidPropensity { row, value });
        }
    }
    Ok(())
}

fn report(value: f64, estimator: EstimatorKind, cost: &CostSpec, n: usize) -> Result<RiskReport> {
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite risk {value}")));
    }
    Ok(RiskReport {
        value,
        estimator,
        cost: *cost,
        n,
    })
}

/// Cost of predicting `yhat` when the class is `y`.
pub fn delta(cost: &CostSpec, y: u8, yhat: f64) -> Result<f64> {
    cost.delta(y, yhat)
}

pub fn true_risk(yhat: &[f64], y: &[u8], cost: &CostSpec) -> Result<RiskReport> {
    let n = yhat.len();
    check_lengths(n, &[("y", y.len())])?;
    let mut total = 0.0;
    for (&p, &yi) in yhat.iter().zip(y) {
        total += cost.delta(yi, p)?;
    }
    report(total / n as f64, EstimatorKind::True, cost, n)
}

/// Contribution of one row to the propensity-weighted estimator.
fn pw_term(cost: &CostSpec, s: u8, e: f64, yhat: f64) -> Result<f64> {
    let d0 = cost.delta(0, yhat)?;
    if s == 1 {
        let d1 = cost.delta(1, yhat)?;
        Ok(d1 / e + (1.0 - 1.0 / e) * d0)
    } else {
        Ok(d0)
    }
}

pub fn pw_risk(yhat: &[f64], s: &[u8], e: &[f64], cost: &CostSpec) -> Result<RiskReport> {
    let n = yhat.len();
    check_lengths(n, &[("s", s.len()), ("e", e.len())])?;
    check_propensities(e)?;
    let mut total = 0.0;
    for ((&p, &si), &ei) in yhat.iter().zip(s).zip(e) {
        total += pw_term(cost, si, ei, p)?;
    }
    report(total / n as f64, EstimatorKind::PropensityWeighted, cost, n)
}

/// The conditional-expectation risk `E[R | e, s, yhat]`.
///
/// It looks like a natural way to use propensity scores but it is biased:
/// the hypothesis that predicts the positive class everywhere scores
/// (nearly) zero regardless of the data. It is provided for comparison and
/// must not be used as a training objective.
pub fn expected_risk(yhat: &[f64], s: &[u8], e: &[f64], cost: &CostSpec) -> Result<RiskReport> {
    let n = yhat.len();
    check_lengths(n, &[("s", s.len()), ("e", e.len())])?;
    check_propensities(e)?;
    let mut total = 0.0;
    for ((&p, &si), &ei) in yhat.iter().zip(s).zip(e) {
        let d1 = cost.delta(1, p)?;
        if si == 1 {
            total += d1;
            continue;
        }
        let denom = 1.0 - p * ei;
        if denom <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "yhat * e = 1 (yhat = {p}, e = {ei})"
            )));
        }
        let d0 = cost.delta(0, p)?;
        total += p * (1.0 - ei) / denom * d1 + (1.0 - p) / denom * d0;
    }
    report(total / n as f64, EstimatorKind::Expected, cost, n)
}

/// Bias `R - E[R_pw]` of the propensity-weighted estimator when `e_hat` is
/// used in place of the true propensities `e_true`. Only positives
/// contribute.
pub fn pw_bias(
    yhat: &[f64],
    y: &[u8],
    e_true: &[f64],
    e_hat: &[f64],
    cost: &CostSpec,
) -> Result<f64> {
    let n = yhat.len();
    check_lengths(n, &[("y", y.len()), ("e_true", e_true.len()), ("e_hat", e_hat.len())])?;
    check_propensities(e_true)?;
    check_propensities(e_hat)?;
    let mut total = 0.0;
    for i in 0..n {
        if y[i] == 1 {
            let gap = cost.delta(1, yhat[i])? - cost.delta(0, yhat[i])?;
            total += (1.0 - e_true[i] / e_hat[i]) * gap;
        }
    }
    Ok(total / n as f64)
}

/// Exact expectation of [`pw_risk`] computed with `e_used`, over labelings
/// `s_i ~ Bernoulli(y_i * e_true_i)`. The estimator is linear in `s`, so the
/// expectation is taken row by row.
pub fn brute_force_expected_pw_risk(
    yhat: &[f64],
    y: &[u8],
    e_true: &[f64],
    e_used: &[f64],
    cost: &CostSpec,
) -> Result<f64> {
    let n = yhat.len();
    check_lengths(n, &[("y", y.len()), ("e_true", e_true.len()), ("e_used", e_used.len())])?;
    check_propensities(e_true)?;
    check_propensities(e_used)?;
    let mut total = 0.0;
    for i in 0..n {
        let p_labeled = f64::from(y[i]) * e_true[i];
        total += p_labeled * pw_term(cost, 1, e_used[i], yhat[i])?
            + (1.0 - p_labeled) * pw_term(cost, 0, e_used[i], yhat[i])?;
    }
    Ok(total / n as f64)
}

/// With probability `1 - eta`, `|R_pw - R| <= sqrt(delta_max^2 ln(2/eta) / 2n)`.
pub fn estimator_bound(cost: &CostSpec, spec: &BoundSpec) -> f64 {
    hoeffding_radius(cost.delta_max(), (2.0 / spec.eta()).ln(), spec.sample_size())
}

/// With probability `1 - eta`, the true risk of the empirical minimizer over
/// a finite hypothesis space exceeds its estimated risk by at most
/// `sqrt(delta_max^2 ln(|H|/eta) / 2n)`.
pub fn erm_bound(cost: &CostSpec, spec: &BoundSpec) -> f64 {
    let log_term = (spec.hypothesis_count() as f64 / spec.eta()).ln();
    hoeffding_radius(cost.delta_max(), log_term, spec.sample_size())
}

fn hoeffding_radius(delta_max: f64, log_term: f64, n: u64) -> f64 {
    (delta_max * delta_max * log_term.max(0.0) / (2.0 * n as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CostKind;
    use approx::assert_abs_diff_eq;

    fn mse() -> CostSpec {
        CostSpec::evaluation(CostKind::Mse)
    }
    fn mae() -> CostSpec {
        CostSpec::evaluation(CostKind::Mae)
    }
    fn log_loss() -> CostSpec {
        CostSpec::evaluation(CostKind::LogLoss)
    }

    #[test]
    fn delta_examples() {
        let eps = 1e-12;
        assert!(delta(&mse(), 1, 1.0 - eps).unwrap() < 1e-20);
        assert_abs_diff_eq!(delta(&mae(), 0, 0.3).unwrap(), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(delta(&log_loss(), 1, 0.5).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(delta(&mse(), 1, 1.0).is_err());
        assert!(delta(&mse(), 1, 0.0).is_err());
    }

    #[test]
    fn true_risk_examples() {
        let eps = 1e-12;
        let r = true_risk(&[1.0 - eps, eps, eps], &[1, 0, 0], &mse()).unwrap();
        assert!(r.value < 1e-20);
        assert_abs_diff_eq!(
            true_risk(&[0.5, 0.5], &[1, 0], &mae()).unwrap().value,
            0.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            true_risk(&[0.9, 0.2, 0.4], &[1, 0, 0], &mse()).unwrap().value,
            0.07,
            epsilon = 1e-15
        );
        assert!(true_risk(&[0.5], &[1, 0], &mse()).is_err());
    }

    #[test]
    fn pw_risk_examples() {
        let yhat = [0.3, 0.7, 0.9, 0.2];
        let y = [1, 0, 1, 0];
        for cost in [mse(), mae(), log_loss()] {
            let full = pw_risk(&yhat, &y, &[1.0; 4], &cost).unwrap().value;
            assert_eq!(full, true_risk(&yhat, &y, &cost).unwrap().value);
        }

        let r = pw_risk(&[0.8], &[1], &[0.5], &log_loss()).unwrap();
        assert_abs_diff_eq!(r.value, 2.0 * -(0.8f64.ln()) - (-(0.2f64.ln())), epsilon = 1e-12);
        assert_abs_diff_eq!(r.value, -1.1631, epsilon = 1e-4);
        assert_eq!(r.estimator, EstimatorKind::PropensityWeighted);

        let r = pw_risk(&[0.8, 0.3], &[1, 0], &[0.5, 0.5], &mse()).unwrap();
        assert_abs_diff_eq!(r.value, -0.235, epsilon = 1e-12);
    }

    #[test]
    fn pw_risk_rejects_bad_propensity() {
        assert!(matches!(
            pw_risk(&[0.5], &[1], &[0.0], &mse()),
            Err(Error::InvalidPropensity { row: 0, .. })
        ));
        assert!(pw_risk(&[0.5, 0.5], &[1], &[0.5], &mse()).is_err());
    }

    #[test]
    fn expected_risk_examples() {
        let eps = 1e-12;
        let n = 6;
        let yhat = vec![1.0 - eps; n];
        let s = [1, 0, 0, 1, 0, 0];
        let e = [0.2, 0.5, 0.8, 0.3, 0.6, 0.7];
        assert!(expected_risk(&yhat, &s, &e, &mae()).unwrap().value < 1e-9);

        // Labeled rows contribute exactly delta_1.
        let r = expected_risk(&[0.3], &[1], &[0.4], &mse()).unwrap();
        assert_eq!(r.value, mse().delta(1, 0.3).unwrap());

        let r = expected_risk(&[0.5], &[0], &[0.5], &mae()).unwrap();
        assert_abs_diff_eq!(r.value, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn pw_bias_examples() {
        let yhat = [0.2, 0.9, 0.6];
        let y = [1, 1, 0];
        let e = [0.3, 0.6, 0.5];
        assert_eq!(pw_bias(&yhat, &y, &e, &e, &mse()).unwrap(), 0.0);
        assert_eq!(
            pw_bias(&yhat, &[0, 0, 0], &e, &[0.9, 0.1, 0.4], &mse()).unwrap(),
            0.0
        );
        let b = pw_bias(&[0.9], &[1], &[0.4], &[0.8], &mse()).unwrap();
        assert_abs_diff_eq!(b, -0.4, epsilon = 1e-12);
    }

    #[test]
    fn brute_force_expectation_examples() {
        let yhat = [0.2, 0.9, 0.6];
        let y = [1, 1, 0];
        let e = [0.3, 0.6, 0.5];
        let cost = log_loss();
        assert_abs_diff_eq!(
            brute_force_expected_pw_risk(&yhat, &y, &e, &e, &cost).unwrap(),
            true_risk(&yhat, &y, &cost).unwrap().value,
            epsilon = 1e-12
        );
        // A negative row contributes delta_0 whatever propensity is used.
        let v = brute_force_expected_pw_risk(&[0.35], &[0], &[0.7], &[0.2], &cost).unwrap();
        assert_eq!(v, cost.delta(0, 0.35).unwrap());

        // Bias is true risk minus expected estimate.
        let gap = true_risk(&[0.9], &[1], &mse()).unwrap().value
            - brute_force_expected_pw_risk(&[0.9], &[1], &[0.4], &[0.8], &mse()).unwrap();
        assert_abs_diff_eq!(gap, -0.4, epsilon = 1e-12);
    }

    #[test]
    fn estimator_bound_examples() {
        let eta = 2.0 / std::f64::consts::E.powi(2);
        let b = estimator_bound(&mse(), &BoundSpec::new(eta, 1, 1).unwrap());
        assert_abs_diff_eq!(b, 1.0, epsilon = 1e-12);

        let b1 = estimator_bound(&mse(), &BoundSpec::new(0.1, 1, 50).unwrap());
        let b4 = estimator_bound(&mse(), &BoundSpec::new(0.1, 1, 200).unwrap());
        assert_abs_diff_eq!(b4, b1 / 2.0, epsilon = 1e-15);

        let b = estimator_bound(&mse(), &BoundSpec::new(0.05, 1, 1000).unwrap());
        assert_abs_diff_eq!(b, (40f64.ln() / 2000.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(b, 0.04294, epsilon = 1e-5);
    }

    #[test]
    fn erm_bound_examples() {
        let spec = BoundSpec::new(0.05, 2, 300).unwrap();
        assert_eq!(erm_bound(&mse(), &spec), estimator_bound(&mse(), &spec));
        assert_eq!(erm_bound(&mse(), &BoundSpec::new(1.0, 1, 10).unwrap()), 0.0);
        let b = erm_bound(&mse(), &BoundSpec::new(0.05, 1024, 1000).unwrap());
        assert_abs_diff_eq!(b, (20480f64.ln() / 2000.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(b, 0.0705, epsilon = 1e-4);
    }

    #[test]
    fn log_loss_bound_uses_clip() {
        let cost = CostSpec::new(CostKind::LogLoss, 1e-6).unwrap();
        assert!(cost.bound_is_clip_dependent());
        let spec = BoundSpec::new(0.1, 1, 100).unwrap();
        assert_abs_diff_eq!(
            estimator_bound(&cost, &spec),
            -(1e-6f64).ln() * estimator_bound(&mse(), &spec),
            epsilon = 1e-12
        );
    }
}
