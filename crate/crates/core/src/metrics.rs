//! Evaluation metrics.

use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize, what: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch {
            what,
            expected: a,
            found: b,
        });
    }
    if a == 0 {
        return Err(Error::InvalidArgument(format!("{what}: no rows to evaluate")));
    }
    Ok(())
}

/// Mean squared difference between predicted probabilities and binary truth.
pub fn mse_prob(yhat: &[f64], y: &[u8]) -> Result<f64> {
    check_lengths(yhat.len(), y.len(), "truth labels")?;
    let sum: f64 = yhat
        .iter()
        .zip(y)
        .map(|(&p, &t)| (p - f64::from(t)).powi(2))
        .sum();
    Ok(sum / y.len() as f64)
}

/// ROC-AUC by the midrank (Mann-Whitney) statistic; ties count half.
pub fn roc_auc(scores: &[f64], y: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), y.len(), "truth labels")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = y.iter().filter(|&&t| t == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their mean.
        let midrank = (start + 1 + end) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&i| y[i] == 1).count();
        rank_sum += midrank * positives as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Mean squared error of propensity estimates over the positive rows.
pub fn mse_propensity(e_hat: &[f64], e_true: &[f64], y: &[u8]) -> Result<f64> {
    check_lengths(e_hat.len(), e_true.len(), "true propensities")?;
    check_lengths(e_hat.len(), y.len(), "truth labels")?;
    let (sum, count) = e_hat
        .iter()
        .zip(e_true)
        .zip(y)
        .filter(|(_, &t)| t == 1)
        .fold((0.0, 0usize), |(s, c), ((a, b), _)| (s + (a - b).powi(2), c + 1));
    if count == 0 {
        return Err(Error::SingleClass("propensity MSE needs positive rows".into()));
    }
    Ok(sum / count as f64)
}
