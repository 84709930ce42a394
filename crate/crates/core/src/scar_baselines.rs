//! Methods that assume a constant labeling probability (SCAR), and the
//! reduction of discrete SAR data to SCAR by stratifying on the propensity
//! attributes.
//!
//! Under SCAR the label frequency `c = Pr(s=1|y=1)` links the observed-label
//! model and the classifier: `Pr(y=1|x) = Pr(s=1|x) / c`, and the class
//! prior is `alpha = Pr(s=1) / c`. The label frequency is estimated here by
//! the mean prediction of an observed-label model over the labeled rows,
//! which is consistent when the classes do not overlap.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::glm::{self, TrainConfig};
use crate::types::{LinearModel, PuDataset};
use crate::weighting;

/// Smallest label frequency an estimate may take.
pub const MIN_LABEL_FREQUENCY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScarEstimate {
    /// Label frequency `Pr(s=1|y=1)`.
    pub c: f64,
    /// Implied class prior `Pr(y=1)`.
    pub alpha: f64,
}

/// Supervised fit that treats every unlabeled example as negative.
pub fn train_naive(pu: &PuDataset, config: &TrainConfig) -> Result<LinearModel> {
    let labeled = pu.labeled_count();
    if labeled == 0 || labeled == pu.n_rows() {
        return Err(Error::SingleClass("naive model needs labeled and unlabeled rows".into()));
    }
    glm::fit_supervised(pu.features(), pu.observed(), config)
}

/// Estimate the label frequency as the mean prediction of `s_model` over the
/// labeled rows, clipped to `[max(mean(s), eps), 1]` so that `alpha <= 1`.
pub fn estimate_c(pu: &PuDataset, s_model: &LinearModel, prob_clip: f64) -> Result<ScarEstimate> {
    let labeled: Vec<usize> = (0..pu.n_rows()).filter(|&i| pu.observed()[i] == 1).collect();
    if labeled.is_empty() {
        return Err(Error::NoLabeledRows);
    }
    let probs = glm::predict_proba(s_model, pu.features(), prob_clip)?;
    let mut picked: Vec<f64> = labeled.iter().map(|&i| probs[i]).collect();
    // Sorting makes the sum independent of row order.
    picked.sort_by(f64::total_cmp);
    let raw = picked.iter().sum::<f64>() / picked.len() as f64;
    let label_rate = labeled.len() as f64 / pu.n_rows() as f64;
    let c = raw.clamp(label_rate.max(MIN_LABEL_FREQUENCY), 1.0);
    Ok(ScarEstimate {
        c,
        alpha: label_rate / c,
    })
}

/// Propensity-weighted training with the constant propensity `c`.
pub fn train_scar(pu: &PuDataset, c: f64, e_floor: f64, config: &TrainConfig) -> Result<LinearModel> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidArgument(format!("label frequency must lie in (0, 1], got {c}")));
    }
    weighting::train_pw_classifier(pu, &vec![c; pu.n_rows()], e_floor, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifyConfig {
    pub train: TrainConfig,
    pub e_floor: f64,
    /// A propensity attribute with more distinct values than this is treated
    /// as continuous and rejected.
    pub max_levels: usize,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            e_floor: weighting::DEFAULT_E_FLOOR,
            max_levels: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    /// Values of the propensity attributes shared by every row here.
    pub configuration: Vec<f64>,
    pub rows: Vec<usize>,
    pub labeled: usize,
    pub estimate: ScarEstimate,
    /// The stratum could not be estimated on its own and uses the global
    /// estimate.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratification {
    pub strata: Vec<Stratum>,
    pub global: ScarEstimate,
}

fn config_key(values: &[f64]) -> Vec<u64> {
    // -0.0 and 0.0 describe the same configuration.
    values.iter().map(|v| (v + 0.0).to_bits()).collect()
}

impl Stratification {
    /// Label frequency for a propensity-attribute configuration; unseen
    /// configurations get the global estimate.
    pub fn lookup(&self, configuration: &[f64]) -> f64 {
        let key = config_key(configuration);
        self.strata
            .iter()
            .find(|s| config_key(&s.configuration) == key)
            .map_or(self.global.c, |s| s.estimate.c)
    }

    /// Summary table: configuration, row count, labeled count, estimate.
    pub fn to_table(&self) -> String {
        let mut out = String::from("configuration\trows\tlabeled\tc_hat\tfallback\n");
        for s in &self.strata {
            let cfg: Vec<String> = s.configuration.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                cfg.join(","),
                s.rows.len(),
                s.labeled,
                s.estimate.c,
                s.fallback
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ScarReduction {
    pub stratification: Stratification,
    /// Per-row propensity, constant within each stratum.
    pub e_hat: Array1<f64>,
    pub classifier: LinearModel,
}

fn estimate_stratum(pu: &PuDataset, rows: &[usize], config: &StratifyConfig) -> Result<Option<ScarEstimate>> {
    let sub = pu.select_rows(rows);
    let labeled = sub.labeled_count();
    if labeled == 0 {
        return Ok(None);
    }
    if labeled == sub.n_rows() {
        return Ok(Some(ScarEstimate { c: 1.0, alpha: 1.0 }));
    }
    let s_model = train_naive(&sub, &config.train)?;
    estimate_c(&sub, &s_model, config.train.prob_clip).map(Some)
}

/// Partition rows by propensity-attribute configuration, estimate a label
/// frequency per stratum, and train one classifier with the pooled per-row
/// propensities.
pub fn reduce_sar_to_scar(pu: &PuDataset, config: &StratifyConfig) -> Result<ScarReduction> {
    let xe = pu.propensity_features()?;
    for (j, &column) in pu.propensity_attr_indices().iter().enumerate() {
        let mut levels: Vec<u64> = xe.column(j).iter().map(|v| (v + 0.0).to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        if levels.len() > config.max_levels {
            return Err(Error::ContinuousPropensityAttribute {
                column,
                levels: levels.len(),
            });
        }
    }
    if pu.labeled_count() == 0 {
        return Err(Error::NoLabeledRows);
    }

    let mut groups: BTreeMap<Vec<u64>, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for (i, row) in xe.rows().into_iter().enumerate() {
        let values: Vec<f64> = row.iter().map(|v| v + 0.0).collect();
        groups
            .entry(config_key(&values))
            .or_insert_with(|| (values, Vec::new()))
            .1
            .push(i);
    }

    let all_rows: Vec<usize> = (0..pu.n_rows()).collect();
    let global = estimate_stratum(pu, &all_rows, config)?.ok_or(Error::NoLabeledRows)?;

    let mut strata = Vec::with_capacity(groups.len());
    for (_, (configuration, rows)) in groups {
        let labeled = rows.iter().filter(|&&i| pu.observed()[i] == 1).count();
        let own = match estimate_stratum(pu, &rows, config) {
            Ok(est) => est,
            Err(err) if matches!(err, Error::SingleClass(_)) => None,
            Err(err) => return Err(err),
        };
        if own.is_none() {
            log::info!(
                "stratum {configuration:?} ({} rows, {labeled} labeled) falls back to the global estimate",
                rows.len()
            );
        }
        strata.push(Stratum {
            configuration,
            labeled,
            fallback: own.is_none(),
            estimate: own.unwrap_or(global),
            rows,
        });
    }

    let mut e_hat = Array1::zeros(pu.n_rows());
    for s in &strata {
        for &i in &s.rows {
            e_hat[i] = s.estimate.c;
        }
    }
    let classifier = weighting::train_pw_classifier(
        pu,
        e_hat.as_slice().expect("contiguous"),
        config.e_floor,
        &config.train,
    )?;
    Ok(ScarReduction {
        stratification: Stratification { strata, global },
        e_hat,
        classifier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn constant_s_model_gives_its_prediction() {
        let pu = PuDataset::new(array![[0.1], [0.2], [0.3], [0.4]], vec![1, 0, 1, 0]).unwrap();
        let model = LinearModel::new(array![0.0], glm::logit(0.7));
        let est = estimate_c(&pu, &model, 1e-6).unwrap();
        assert!((est.c - 0.7).abs() < 1e-12);
        assert!((est.alpha - 0.5 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn alpha_never_exceeds_one() {
        let pu = PuDataset::new(array![[0.1], [0.2], [0.3], [0.4]], vec![1, 1, 1, 0]).unwrap();
        let model = LinearModel::new(array![0.0], glm::logit(0.2));
        let est = estimate_c(&pu, &model, 1e-6).unwrap();
        assert_eq!(est.c, 0.75);
        assert!(est.alpha <= 1.0);
    }

    #[test]
    fn estimate_c_needs_labels() {
        let pu = PuDataset::new(array![[0.1], [0.2]], vec![0, 0]).unwrap();
        assert!(matches!(
            estimate_c(&pu, &LinearModel::zeros(1), 1e-6),
            Err(Error::NoLabeledRows)
        ));
    }

    #[test]
    fn naive_needs_both_values() {
        let pu = PuDataset::new(array![[0.1], [0.2]], vec![0, 0]).unwrap();
        assert!(train_naive(&pu, &TrainConfig::default()).is_err());
    }

    #[test]
    fn train_scar_with_c_one_is_fit_on_s() {
        let pu = PuDataset::new(array![[0.9], [0.5], [-0.4], [-0.8], [0.1]], vec![1, 1, 0, 0, 0])
            .unwrap();
        let config = TrainConfig::default();
        let scar = train_scar(&pu, 1.0, 0.0, &config).unwrap();
        let naive = train_naive(&pu, &config).unwrap();
        assert!((scar.intercept - naive.intercept).abs() < 1e-6);
        assert!((scar.weights[0] - naive.weights[0]).abs() < 1e-6);
        assert!(train_scar(&pu, 0.0, 0.0, &config).is_err());
    }

    #[test]
    fn continuous_propensity_attribute_is_rejected() {
        let n = 40;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { i as f64 / n as f64 } else { 0.0 });
        let s = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
        let pu = PuDataset::new(x, s).unwrap().with_propensity_attrs(vec![0]);
        assert!(matches!(
            reduce_sar_to_scar(&pu, &StratifyConfig::default()),
            Err(Error::ContinuousPropensityAttribute { column: 0, .. })
        ));
    }

    #[test]
    fn stratum_without_labels_falls_back() {
        let x = array![
            [0.9, 0.0],
            [0.8, 0.0],
            [-0.7, 0.0],
            [-0.9, 0.0],
            [0.7, 1.0],
            [-0.6, 1.0]
        ];
        let pu = PuDataset::new(x, vec![1, 0, 0, 0, 0, 0])
            .unwrap()
            .with_propensity_attrs(vec![1]);
        let red = reduce_sar_to_scar(&pu, &StratifyConfig::default()).unwrap();
        let strata = &red.stratification.strata;
        assert_eq!(strata.len(), 2);
        assert!(!strata[0].fallback);
        assert!(strata[1].fallback);
        assert_eq!(strata[1].estimate, red.stratification.global);
        assert_eq!(red.stratification.lookup(&[1.0]), red.stratification.global.c);
        assert_eq!(red.stratification.lookup(&[7.0]), red.stratification.global.c);
        let table = red.stratification.to_table();
        assert_eq!(table.lines().count(), 3);
    }
}
