//! Brute-force and Monte-Carlo checks of the estimator theory and of the EM
//! procedure, runnable outside the test harness.
//!
//! The estimator under test is passed in, so a deliberately broken estimator
//! can be checked to make the suites fail.

use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::glm::{self, TrainConfig};
use crate::risk::{self, RiskReport};
use crate::sar_em::{self, EmConfig};
use crate::simulate::{self, BlobConfig, SimulationConfig};
use crate::types::{BoundSpec, CostKind, CostSpec, LinearModel, PuDataset};

pub type RiskFn = fn(&[f64], &[u8], &[f64], &CostSpec) -> Result<RiskReport>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {}/{}: {}", self.suite, c.name, c.detail)?;
        }
        Ok(())
    }
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// A random small instance: predictions, classes, true and perturbed
/// propensities.
struct SmallInstance {
    yhat: Vec<f64>,
    y: Vec<u8>,
    e: Vec<f64>,
    e_hat: Vec<f64>,
}

fn small_instance(rng: &mut impl Rng, max_n: usize) -> SmallInstance {
    let n = rng.random_range(1..=max_n);
    SmallInstance {
        yhat: (0..n).map(|_| rng.random_range(0.01..0.99)).collect(),
        y: (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect(),
        e: (0..n).map(|_| rng.random_range(0.05..1.0)).collect(),
        e_hat: (0..n).map(|_| rng.random_range(0.05..1.0)).collect(),
    }
}

/// Exact expectation of `estimator` over every selection pattern of the
/// positives, with selection probabilities `e_true` and weights `e_used`.
pub fn enumerate_expected_risk(
    estimator: RiskFn,
    yhat: &[f64],
    y: &[u8],
    e_true: &[f64],
    e_used: &[f64],
    cost: &CostSpec,
) -> Result<f64> {
    let positives: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1).collect();
    let mut total = 0.0;
    let mut s = vec![0u8; y.len()];
    for mask in 0u64..(1 << positives.len()) {
        let mut prob = 1.0;
        for (b, &i) in positives.iter().enumerate() {
            let chosen = (mask >> b) & 1 == 1;
            s[i] = u8::from(chosen);
            prob *= if chosen { e_true[i] } else { 1.0 - e_true[i] };
        }
        total += prob * estimator(yhat, &s, e_used, cost)?.value;
    }
    Ok(total)
}

/// Unbiasedness, bias formula, and expected-risk degeneracy checks.
pub fn props_suite(seed: u64, estimator: RiskFn) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let inst = small_instance(&mut rng, 12);
        for kind in CostKind::ALL {
            let cost = CostSpec::evaluation(kind);
            let expected = enumerate_expected_risk(estimator, &inst.yhat, &inst.y, &inst.e, &inst.e, &cost)?;
            let truth = risk::true_risk(&inst.yhat, &inst.y, &cost)?.value;
            worst = worst.max((expected - truth).abs());
        }
    }
    checks.push(check(
        "unbiasedness",
        worst <= 1e-12,
        format!("max |E[estimate] - true risk| = {worst:.3e} over 100 instances"),
    ));

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let inst = small_instance(&mut rng, 10);
        for kind in CostKind::ALL {
            let cost = CostSpec::evaluation(kind);
            let expected =
                enumerate_expected_risk(estimator, &inst.yhat, &inst.y, &inst.e, &inst.e_hat, &cost)?;
            let truth = risk::true_risk(&inst.yhat, &inst.y, &cost)?.value;
            let bias = risk::pw_bias(&inst.yhat, &inst.y, &inst.e, &inst.e_hat, &cost)?;
            worst = worst.max((truth - expected - bias).abs());
        }
    }
    checks.push(check(
        "bias-formula",
        worst <= 1e-12,
        format!("max |true risk - E[estimate] - bias| = {worst:.3e} over 100 instances"),
    ));

    let mut worst_expected = 0.0f64;
    let mut min_gap = f64::INFINITY;
    let cost = CostSpec::evaluation(CostKind::Mae);
    for _ in 0..100 {
        let n = rng.random_range(4..=30);
        let mut y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        y[0] = 0;
        y[1] = 1;
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let s: Vec<u8> = y.iter().zip(&e).map(|(&y, &e)| u8::from(y == 1 && rng.random_bool(e))).collect();
        let all_pos = vec![1.0 - 1e-12; n];
        worst_expected = worst_expected.max(risk::expected_risk(&all_pos, &s, &e, &cost)?.value);
        min_gap = min_gap.min(risk::true_risk(&all_pos, &y, &cost)?.value);
    }
    checks.push(check(
        "expected-risk-degeneracy",
        worst_expected <= 1e-9 && min_gap > 0.01,
        format!(
            "all-positive hypothesis: max expected risk {worst_expected:.3e}, min true risk {min_gap:.3}"
        ),
    ));

    Ok(SuiteReport {
        suite: "props".into(),
        checks,
    })
}

/// Empirical exceedance rate of the estimator bound at each `eta`, and the
/// ERM bound check over a grid of 256 hypotheses.
pub fn bounds_suite(seed: u64, labelings: usize, estimator: RiskFn) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 200;
    let cost = CostSpec::evaluation(CostKind::Mse);
    let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let e: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
    let yhat: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    let truth = risk::true_risk(&yhat, &y, &cost)?.value;
    let etas = [0.05, 0.1];
    let bounds: Vec<f64> = etas
        .iter()
        .map(|&eta| BoundSpec::new(eta, 1, n as u64).map(|b| risk::estimator_bound(&cost, &b)))
        .collect::<Result<_>>()?;
    let mut exceed = [0usize; 2];
    let mut s = vec![0u8; n];
    for _ in 0..labelings {
        for i in 0..n {
            s[i] = u8::from(y[i] == 1 && rng.random_bool(e[i]));
        }
        let gap = (estimator(&yhat, &s, &e, &cost)?.value - truth).abs();
        for (k, b) in bounds.iter().enumerate() {
            exceed[k] += usize::from(gap > *b);
        }
    }
    let mut checks: Vec<CheckResult> = etas
        .iter()
        .zip(&bounds)
        .zip(exceed)
        .map(|((&eta, &b), count)| {
            let rate = count as f64 / labelings as f64;
            check(
                &format!("estimator-bound-eta-{eta}"),
                rate <= eta,
                format!("bound {b:.4}, exceedance rate {rate:.4} over {labelings} labelings"),
            )
        })
        .collect();

    // ERM over 256 logistic hypotheses on a one-dimensional feature.
    let x: Vec<f64> = (0..n).map(|i| if y[i] == 1 { rng.random_range(-0.3..1.0) } else { rng.random_range(-1.0..0.3) }).collect();
    let hypotheses: Vec<Vec<f64>> = (0..16)
        .flat_map(|a| (0..16).map(move |b| (a, b)))
        .map(|(a, b)| {
            let slope = 0.5 * a as f64;
            let shift = -1.0 + 2.0 * b as f64 / 15.0;
            x.iter().map(|&v| glm::sigmoid(slope * (v - shift))).collect()
        })
        .collect();
    let true_risks: Vec<f64> = hypotheses
        .iter()
        .map(|h| risk::true_risk(h, &y, &cost).map(|r| r.value))
        .collect::<Result<_>>()?;
    let erm_labelings = labelings.min(1000);
    let bound = risk::erm_bound(&cost, &BoundSpec::new(0.05, hypotheses.len() as u64, n as u64)?);
    let mut violations = 0;
    for _ in 0..erm_labelings {
        for i in 0..n {
            s[i] = u8::from(y[i] == 1 && rng.random_bool(e[i]));
        }
        let mut best = (f64::INFINITY, 0);
        for (k, h) in hypotheses.iter().enumerate() {
            let r = estimator(h, &s, &e, &cost)?.value;
            if r < best.0 {
                best = (r, k);
            }
        }
        violations += usize::from(true_risks[best.1] > best.0 + bound);
    }
    let rate = violations as f64 / erm_labelings as f64;
    checks.push(check(
        "erm-bound-eta-0.05",
        rate <= 0.05,
        format!("bound {bound:.4}, violation rate {rate:.4} over {erm_labelings} labelings, |H| = 256"),
    ));
    Ok(SuiteReport {
        suite: "bounds".into(),
        checks,
    })
}

/// Discrete population over all configurations of three binary attributes;
/// the last two drive the propensity.
pub struct DiscretePopulation {
    pub configurations: Array2<f64>,
    pub prob_x: Vec<f64>,
    pub f: LinearModel,
    pub e: LinearModel,
    pub propensity_attrs: Vec<usize>,
}

impl DiscretePopulation {
    pub fn new(f: LinearModel, e: LinearModel) -> Self {
        let configurations = Array2::from_shape_fn((8, 3), |(i, j)| ((i >> j) & 1) as f64);
        Self {
            configurations,
            prob_x: vec![1.0 / 8.0; 8],
            f,
            e,
            propensity_attrs: vec![1, 2],
        }
    }

    pub fn class_prob(&self, i: usize) -> f64 {
        glm::predict_row(&self.f, self.configurations.row(i), 0.0)
    }

    pub fn propensity(&self, i: usize) -> f64 {
        let xe = Array1::from_iter(self.propensity_attrs.iter().map(|&j| self.configurations[[i, j]]));
        glm::predict_row(&self.e, xe.view(), 0.0)
    }

    /// Every (configuration, s) pair as a row, with its population probability.
    pub fn expected_rows(&self) -> Result<(PuDataset, Vec<f64>)> {
        let mut rows = Vec::new();
        let mut s = Vec::new();
        let mut weights = Vec::new();
        for i in 0..8 {
            let p_label = self.class_prob(i) * self.propensity(i);
            for (label, p) in [(1u8, p_label), (0u8, 1.0 - p_label)] {
                rows.extend(self.configurations.row(i).iter().copied());
                s.push(label);
                weights.push(self.prob_x[i] * p);
            }
        }
        let x = Array2::from_shape_vec((16, 3), rows).expect("16 x 3");
        let pu = PuDataset::new(x, s)?.with_propensity_attrs(self.propensity_attrs.clone());
        Ok((pu, weights))
    }
}

fn max_abs_diff(a: &LinearModel, b: &LinearModel) -> f64 {
    a.weights
        .iter()
        .zip(b.weights.iter())
        .map(|(x, y)| (x - y).abs())
        .fold((a.intercept - b.intercept).abs(), f64::max)
}

/// E-step Bayes equivalence, population fixed point, and log-likelihood
/// monotonicity on simulated instances.
pub fn em_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let em_config = EmConfig {
        m_step: TrainConfig {
            max_epochs: 500,
            grad_tolerance: 1e-12,
            prob_clip: 1e-12,
            ..TrainConfig::default().with_l2(0.0)
        },
        ..EmConfig::default()
    };

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let f = LinearModel::new(Array1::from_iter((0..3).map(|_| rng.random_range(-2.0..2.0))), rng.random_range(-1.0..1.0));
        let e = LinearModel::new(Array1::from_iter((0..2).map(|_| rng.random_range(-2.0..2.0))), rng.random_range(-1.0..1.0));
        let pop = DiscretePopulation::new(f, e);
        let (pu, _) = pop.expected_rows()?;
        let yhat = sar_em::e_step(&pop.f, &pop.e, &pu, &em_config)?;
        for (r, &post) in yhat.iter().enumerate() {
            let i = r / 2;
            let (fx, ex) = (pop.class_prob(i), pop.propensity(i));
            let bayes = if pu.observed()[r] == 1 {
                1.0
            } else {
                // Pr(y=1, s=0 | x) / Pr(s=0 | x)
                (fx * (1.0 - ex)) / (fx * (1.0 - ex) + (1.0 - fx))
            };
            worst = worst.max((post - bayes).abs());
        }
    }
    checks.push(check(
        "e-step-bayes",
        worst <= 1e-12,
        format!("max |e_step - Pr(y=1|s,x)| = {worst:.3e} over 50 populations"),
    ));

    let mut worst = 0.0f64;
    for _ in 0..10 {
        let f = LinearModel::new(Array1::from_iter((0..3).map(|_| rng.random_range(-1.5..1.5))), rng.random_range(-0.5..0.5));
        let e = LinearModel::new(Array1::from_iter((0..2).map(|_| rng.random_range(-1.5..1.5))), rng.random_range(-0.5..0.5));
        let pop = DiscretePopulation::new(f, e);
        let (pu, weights) = pop.expected_rows()?;
        let yhat = sar_em::e_step(&pop.f, &pop.e, &pu, &em_config)?;
        let (f1, e1) = sar_em::m_step_weighted(
            yhat.as_slice().expect("contiguous"),
            &pu,
            Some(&weights),
            &em_config,
            None,
        )?;
        worst = worst.max(max_abs_diff(&f1, &pop.f)).max(max_abs_diff(&e1, &pop.e));
    }
    checks.push(check(
        "population-fixed-point",
        worst <= 1e-6,
        format!("max parameter change after one EM step from the truth = {worst:.3e}"),
    ));

    let data = simulate::synthetic_blobs(&BlobConfig { n: 600, ..BlobConfig::default() }, seed)?;
    let sim = SimulationConfig {
        seed,
        n_splits: 2,
        n_labelings: 2,
        ..SimulationConfig::default()
    };
    let experiment = simulate::make_experiment_instances(&data, &sim)?;
    let mut worst_drop = 0.0f64;
    let mut iterations = 0;
    for inst in &experiment.instances {
        let out = sar_em::run_em(&inst.train, &EmConfig::default())?;
        iterations += out.iterations;
        for w in out.trace.windows(2) {
            worst_drop = worst_drop.max(w[0].loglik - w[1].loglik);
        }
    }
    checks.push(check(
        "loglik-monotone",
        worst_drop <= 1e-9,
        format!(
            "largest per-step decrease {worst_drop:.3e} over {} runs, {iterations} iterations",
            experiment.instances.len()
        ),
    ));
    Ok(SuiteReport {
        suite: "em".into(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(yhat: &[f64], s: &[u8], e: &[f64], cost: &CostSpec) -> Result<RiskReport> {
        let mut r = risk::pw_risk(yhat, s, e, cost)?;
        r.value = -r.value;
        Ok(r)
    }

    #[test]
    fn props_suite_passes_and_catches_mutation() {
        assert!(props_suite(1, risk::pw_risk).unwrap().passed());
        let broken = props_suite(1, flipped).unwrap();
        assert!(broken.failures().any(|c| c.name == "unbiasedness"));
    }

    #[test]
    fn bounds_suite_passes() {
        let report = bounds_suite(3, 2000, risk::pw_risk).unwrap();
        assert!(report.passed(), "{report}");
    }
}
