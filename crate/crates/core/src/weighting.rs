//! Propensity-weighted training.
//!
//! A labeled example with propensity `e` stands for `1/e` positives, of which
//! `1/e - 1` went unlabeled and therefore also appear (wrongly) among the
//! unlabeled examples as negatives. Each labeled row is expanded into a
//! positive copy with weight `1/e` and a negative copy with weight `1 - 1/e`
//! that cancels the surplus negative mass. Minimizing the weighted log loss
//! of the expanded set minimizes the propensity-weighted risk.

use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::glm::{self, TrainConfig, WeightedExample};
use crate::types::{LinearModel, PuDataset};

/// Default lower bound applied to propensity scores before inverting them.
pub const DEFAULT_E_FLOOR: f64 = 0.05;

/// Expand `pu` into weighted examples using propensity estimates `e_hat`,
/// floored at `e_floor` (0 disables the floor).
///
/// Output order follows the input rows; a labeled row yields its positive
/// copy immediately followed by its negative companion.
pub fn expand<'a>(pu: &'a PuDataset, e_hat: &[f64], e_floor: f64) -> Result<Vec<WeightedExample<'a>>> {
    if e_hat.len() != pu.n_rows() {
        return Err(Error::LengthMismatch {
            what: "propensity estimates",
            expected: pu.n_rows(),
            found: e_hat.len(),
        });
    }
    if !(0.0..=1.0).contains(&e_floor) {
        return Err(Error::InvalidArgument(format!("e_floor must lie in [0, 1], got {e_floor}")));
    }
    let mut out = Vec::with_capacity(pu.n_rows() + pu.labeled_count());
    for (i, (&s, &e)) in pu.observed().iter().zip(e_hat).enumerate() {
        let row: ArrayView1<'a, f64> = pu.row(i);
        if s == 1 {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::InvalidPropensity { row: i, value: e });
            }
            let inv = 1.0 / e.max(e_floor);
            out.push(WeightedExample::new(row, 1, inv));
            out.push(WeightedExample::new(row, 0, 1.0 - inv));
        } else {
            out.push(WeightedExample::new(row, 0, 1.0));
        }
    }
    Ok(out)
}

/// Train a classifier by minimizing the propensity-weighted log loss.
pub fn train_pw_classifier(
    pu: &PuDataset,
    e_hat: &[f64],
    e_floor: f64,
    config: &TrainConfig,
) -> Result<LinearModel> {
    let examples = expand(pu, e_hat, e_floor)?;
    let (positive, negative) = examples.iter().fold((0.0, 0.0), |(p, n), ex| {
        if ex.weight > 0.0 {
            (p + ex.weight, n)
        } else {
            (p, n - ex.weight)
        }
    });
    if positive <= negative {
        return Err(Error::InvalidArgument(format!(
            "negative weight mass {negative} is not below positive mass {positive}"
        )));
    }
    glm::fit_weighted(&examples, config, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pu() -> PuDataset {
        PuDataset::new(array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]], vec![1, 0, 1]).unwrap()
    }

    #[test]
    fn unit_propensity_adds_zero_weight_companions() {
        let pu = pu();
        let ex = expand(&pu, &[1.0, 1.0, 1.0], 0.0).unwrap();
        let summary: Vec<(u8, f64)> = ex.iter().map(|e| (e.target, e.weight)).collect();
        assert_eq!(summary, vec![(1, 1.0), (0, 0.0), (0, 1.0), (1, 1.0), (0, 0.0)]);
        assert_eq!(ex.len(), pu.n_rows() + pu.labeled_count());
    }

    #[test]
    fn half_propensity_gives_two_and_minus_one() {
        let pu = PuDataset::new(array![[0.0]], vec![1]).unwrap();
        let ex = expand(&pu, &[0.5], 0.0).unwrap();
        assert_eq!((ex[0].target, ex[0].weight), (1, 2.0));
        assert_eq!((ex[1].target, ex[1].weight), (0, -1.0));
    }

    #[test]
    fn floor_is_applied() {
        let pu = PuDataset::new(array![[0.0]], vec![1]).unwrap();
        let ex = expand(&pu, &[0.25], 0.5).unwrap();
        assert_eq!(ex[0].weight, 2.0);
        assert_eq!(ex[1].weight, -1.0);
    }

    #[test]
    fn nonpositive_propensity_is_rejected_before_flooring() {
        let pu = pu();
        assert!(matches!(
            expand(&pu, &[0.0, 0.5, 0.5], 0.5),
            Err(Error::InvalidPropensity { row: 0, .. })
        ));
        assert!(expand(&pu, &[0.5, 0.5], 0.5).is_err());
    }

    #[test]
    fn pair_weights_sum_to_one() {
        let pu = pu();
        let ex = expand(&pu, &[0.37, 0.9, 0.11], 0.0).unwrap();
        let total: f64 = ex.iter().map(|e| e.weight).sum();
        assert!((total - pu.n_rows() as f64).abs() < 1e-12);
    }
}
