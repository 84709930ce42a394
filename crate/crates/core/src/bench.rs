//! Benchmark runner: trains each method on every simulated PU instance and
//! aggregates test metrics with 95% t-intervals.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::glm::{self, TrainConfig};
use crate::metrics;
use crate::sar_em::{self, EmConfig, TraceRecord};
use crate::scar_baselines::{self, Stratification, StratifyConfig};
use crate::simulate::{self, ExperimentInstance, RunManifest, SimulationConfig};
use crate::types::{LabeledDataset, LinearModel, PuDataset, EVAL_CLIP};
use crate::weighting::{self, DEFAULT_E_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// Unlabeled examples treated as negatives.
    Naive,
    /// SCAR weighting with the label frequency estimated from a naive model.
    ScarEn,
    /// SCAR estimate per propensity-attribute configuration.
    SarStrat,
    SarEm,
    /// Propensity weighting with the simulator's true propensity scores.
    SarTrueE,
    /// Trained on the hidden classes; an upper bound.
    Supervised,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Naive,
        Method::ScarEn,
        Method::SarStrat,
        Method::SarEm,
        Method::SarTrueE,
        Method::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::ScarEn => "scar-en",
            Method::SarStrat => "sar-strat",
            Method::SarEm => "sar-em",
            Method::SarTrueE => "sar-true-e",
            Method::Supervised => "supervised",
        }
    }

    pub fn estimates_propensity(self) -> bool {
        matches!(self, Method::ScarEn | Method::SarStrat | Method::SarEm)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sar-scar-strat" => Ok(Method::SarStrat),
            _ => Method::ALL
                .into_iter()
                .find(|m| m.name() == s)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    MseF,
    RocAucF,
    MseE,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::MseF, Metric::RocAucF, Metric::MseE];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MseF => "mse_f",
            Metric::RocAucF => "roc_auc_f",
            Metric::MseE => "mse_e",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub train: TrainConfig,
    pub em: EmConfig,
    pub stratify: StratifyConfig,
    pub e_floor: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            em: EmConfig::default(),
            stratify: StratifyConfig::default(),
            e_floor: DEFAULT_E_FLOOR,
        }
    }
}

/// How a trained method scores the propensity of a row.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityEstimate {
    Constant(f64),
    Strata(Stratification),
    Model(LinearModel),
}

impl PropensityEstimate {
    pub fn predict(&self, features: ArrayView2<'_, f64>, indices: &[usize]) -> Result<Vec<f64>> {
        match self {
            PropensityEstimate::Constant(c) => Ok(vec![*c; features.nrows()]),
            PropensityEstimate::Strata(strata) => {
                if let Some(&bad) = indices.iter().find(|&&j| j >= features.ncols()) {
                    return Err(Error::InvalidArgument(format!(
                        "propensity attribute index {bad} out of range"
                    )));
                }
                let xe = features.select(Axis(1), indices);
                Ok(xe.rows().into_iter().map(|r| strata.lookup(&r.to_vec())).collect())
            }
            PropensityEstimate::Model(m) => {
                Ok(sar_em::predict_propensity(m, features, indices, EVAL_CLIP)?.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedMethod {
    pub method: Method,
    pub classifier: LinearModel,
    pub propensity: Option<PropensityEstimate>,
    pub trace: Option<Vec<TraceRecord>>,
}

pub fn train_method(method: Method, pu: &PuDataset, config: &MethodConfig) -> Result<TrainedMethod> {
    let mut propensity = None;
    let mut trace = None;
    let classifier = match method {
        Method::Naive => scar_baselines::train_naive(pu, &config.train)?,
        Method::ScarEn => {
            let s_model = scar_baselines::train_naive(pu, &config.train)?;
            let est = scar_baselines::estimate_c(pu, &s_model, config.train.prob_clip)?;
            propensity = Some(PropensityEstimate::Constant(est.c));
            scar_baselines::train_scar(pu, est.c, config.e_floor, &config.train)?
        }
        Method::SarStrat => {
            let red = scar_baselines::reduce_sar_to_scar(pu, &config.stratify)?;
            propensity = Some(PropensityEstimate::Strata(red.stratification));
            red.classifier
        }
        Method::SarEm => {
            let out = sar_em::run_em(pu, &config.em)?;
            propensity = Some(PropensityEstimate::Model(out.propensity));
            trace = Some(out.trace);
            out.classifier
        }
        Method::SarTrueE => {
            let e = pu
                .true_propensity()
                .ok_or_else(|| Error::MissingData("sar-true-e needs the true propensity scores".into()))?;
            weighting::train_pw_classifier(pu, e, config.e_floor, &config.train)?
        }
        Method::Supervised => {
            let y = pu
                .hidden_classes()
                .ok_or_else(|| Error::MissingData("supervised training needs the hidden classes".into()))?;
            glm::fit_supervised(pu.features(), y, &config.train)?
        }
    };
    Ok(TrainedMethod {
        method,
        classifier,
        propensity,
        trace,
    })
}

/// Classifier metrics on `test`; the propensity metric, when the method
/// estimates one, over the positives of `e_data` with true scores `e_true`.
pub fn evaluate(
    trained: &TrainedMethod,
    test: &LabeledDataset,
    e_data: Option<(ArrayView2<'_, f64>, &[u8], &[f64], &[usize])>,
) -> Result<Vec<(Metric, f64)>> {
    let probs = glm::predict_proba(&trained.classifier, test.features(), EVAL_CLIP)?;
    let probs = probs.as_slice().expect("contiguous");
    let mut out = vec![
        (Metric::MseF, metrics::mse_prob(probs, test.classes())?),
        (Metric::RocAucF, metrics::roc_auc(probs, test.classes())?),
    ];
    if let (Some(p), Some((x, y, e_true, idx))) = (&trained.propensity, e_data) {
        let e_hat = p.predict(x, idx)?;
        out.push((Metric::MseE, metrics::mse_propensity(&e_hat, e_true, y)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub simulation: SimulationConfig,
    pub methods: MethodConfig,
    /// Evaluate propensity MSE on train positives instead of test positives.
    pub propensity_on_train: bool,
    /// Cap on concurrent units; `None` uses every core.
    pub jobs: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            simulation: SimulationConfig::default(),
            methods: MethodConfig::default(),
            propensity_on_train: false,
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub split: usize,
    pub labeling: usize,
    pub method: Method,
    pub outcome: std::result::Result<Vec<(Metric, f64)>, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub metric: Metric,
    pub values: Vec<f64>,
    pub mean: f64,
    /// NaN when fewer than two values exist.
    pub ci_halfwidth: f64,
}

impl MetricSummary {
    pub fn from_values(metric: Metric, values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / n as f64
        };
        let ci_halfwidth = if n < 2 {
            f64::NAN
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .expect("positive degrees of freedom")
                .inverse_cdf(0.975);
            t * (var / n as f64).sqrt()
        };
        Self {
            metric,
            values,
            mean,
            ci_halfwidth,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.values.len() < 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub metrics: Vec<MetricSummary>,
    pub n_instances: usize,
    pub n_failed: usize,
}

impl MethodResult {
    pub fn metric(&self, metric: Metric) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == metric)
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub dataset: String,
    pub results: Vec<MethodResult>,
    pub records: Vec<InstanceRecord>,
    pub manifest: RunManifest,
}

impl BenchReport {
    pub fn result(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }

    /// Per-instance values of `metric` for `method`, `None` where it failed.
    pub fn instance_values(&self, method: Method, metric: Metric) -> Vec<Option<f64>> {
        self.records
            .iter()
            .filter(|r| r.method == method)
            .map(|r| {
                r.outcome
                    .as_ref()
                    .ok()
                    .and_then(|v| v.iter().find(|(m, _)| *m == metric).map(|(_, x)| *x))
            })
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::from("dataset\tmethod\tmetric\tmean\tci_halfwidth\tn_instances\tn_failed\n");
        for r in &self.results {
            for m in &r.metrics {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    self.dataset,
                    r.method,
                    m.metric.name(),
                    m.mean,
                    m.ci_halfwidth,
                    m.values.len(),
                    r.n_failed
                );
            }
        }
        out
    }

    pub fn long_table(&self) -> String {
        let mut out = String::from("dataset\tsplit\tlabeling\tmethod\tmetric\tvalue\tstatus\n");
        for r in &self.records {
            match &r.outcome {
                Ok(values) => {
                    for (m, v) in values {
                        let _ = writeln!(
                            out,
                            "{}\t{}\t{}\t{}\t{}\t{}\tok",
                            self.dataset,
                            r.split,
                            r.labeling,
                            r.method,
                            m.name(),
                            v
                        );
                    }
                }
                Err(msg) => {
                    let msg = msg.replace(['\t', '\n'], " ");
                    let _ = writeln!(
                        out,
                        "{}\t{}\t{}\t{}\t-\tNaN\tfailed: {msg}",
                        self.dataset, r.split, r.labeling, r.method
                    );
                }
            }
        }
        out
    }
}

fn run_unit(instance: &ExperimentInstance, method: Method, config: &BenchConfig) -> Result<Vec<(Metric, f64)>> {
    let trained = train_method(method, &instance.train, &config.methods)?;
    let indices = instance.train.propensity_attr_indices();
    let e_data = if config.propensity_on_train {
        let y = instance
            .train
            .hidden_classes()
            .ok_or_else(|| Error::MissingData("train set lacks hidden classes".into()))?;
        let e = instance
            .train
            .true_propensity()
            .ok_or_else(|| Error::MissingData("train set lacks true propensity".into()))?;
        (instance.train.features(), y, e, indices)
    } else {
        (
            instance.test.features(),
            instance.test.classes(),
            instance.test_propensity.as_slice(),
            indices,
        )
    };
    evaluate(&trained, &instance.test, Some(e_data))
}

/// Simulate instances from `data` and evaluate every method on each.
/// Methods are reported in canonical order regardless of `methods` order.
pub fn run_benchmark(
    dataset: &str,
    data: &LabeledDataset,
    methods: &[Method],
    config: &BenchConfig,
) -> Result<BenchReport> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods selected".into()));
    }
    config.methods.train.validate()?;
    config.methods.em.validate()?;
    let mut methods = methods.to_vec();
    methods.sort_unstable();
    methods.dedup();
    let experiment = simulate::make_experiment_instances(data, &config.simulation)?;
    let units: Vec<(usize, Method)> = (0..experiment.instances.len())
        .flat_map(|i| methods.iter().map(move |&m| (i, m)))
        .collect();
    let work = || -> Vec<InstanceRecord> {
        units
            .par_iter()
            .map(|&(i, method)| {
                let inst = &experiment.instances[i];
                let outcome = run_unit(inst, method, config).map_err(|e| e.to_string());
                if let Err(msg) = &outcome {
                    log::warn!("{method} failed on split {} labeling {}: {msg}", inst.split, inst.labeling);
                }
                InstanceRecord {
                    split: inst.split,
                    labeling: inst.labeling,
                    method,
                    outcome,
                }
            })
            .collect()
    };
    let mut records = match config.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(work),
        None => work(),
    };
    records.sort_by_key(|r| (r.method, r.split, r.labeling));

    let results = methods
        .iter()
        .map(|&method| {
            let mine: Vec<&InstanceRecord> = records.iter().filter(|r| r.method == method).collect();
            let n_failed = mine.iter().filter(|r| r.outcome.is_err()).count();
            let metrics = Metric::ALL
                .into_iter()
                .filter(|&m| m != Metric::MseE || method.estimates_propensity())
                .map(|metric| {
                    let values = mine
                        .iter()
                        .filter_map(|r| r.outcome.as_ref().ok())
                        .filter_map(|v| v.iter().find(|(m, _)| *m == metric).map(|(_, x)| *x))
                        .collect();
                    MetricSummary::from_values(metric, values)
                })
                .collect();
            MethodResult {
                method,
                metrics,
                n_instances: mine.len(),
                n_failed,
            }
        })
        .collect();
    Ok(BenchReport {
        dataset: dataset.to_string(),
        results,
        records,
        manifest: experiment.manifest,
    })
}
