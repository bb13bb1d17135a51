//! Evaluation metric kernels: pass@k, progress score, AUROC, Kendall tau-b,
//! precision/recall/F1 for equivalence judgments, and calibration curves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("AUROC is undefined when only one class is present")]
    SingleClass,
    #[error("Kendall tau is undefined when a vector has zero variance")]
    ZeroVariance,
    #[error("precision is undefined with no predicted positives")]
    NoPredictedPositives,
}

/// Unbiased pass@k estimator: 1 - C(n-c, k) / C(n, k), evaluated with the
/// stable product form. `n` samples, `c` successes, `k <= n`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, MetricError> {
    if k == 0 || k > n {
        return Err(MetricError::InvalidArgs(format!(
            "pass@k requires 1 <= k <= n (n={n}, k={k})"
        )));
    }
    if c > n {
        return Err(MetricError::InvalidArgs(format!(
            "successes c={c} exceed samples n={n}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut prod = 1.0;
    for i in 0..k {
        prod *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - prod)
}

/// Fraction of subgoals completed at trajectory end.
pub fn progress_score(final_z: &[u8]) -> f64 {
    if final_z.is_empty() {
        return 0.0;
    }
    final_z.iter().filter(|&&b| b != 0).count() as f64 / final_z.len() as f64
}

/// Area under the ROC curve via the Mann-Whitney U statistic with average
/// ranks, i.e. ties between a positive and a negative score contribute 1/2.
/// `samples` are (score, label) with label true for positives.
pub fn auroc(samples: &[(f64, bool)]) -> Result<f64, MetricError> {
    let n_pos = samples.iter().filter(|(_, y)| *y).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].0.partial_cmp(&samples[b].0).unwrap());
    // Average ranks over tie groups (1-based ranks).
    let mut ranks = vec![0.0; samples.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && samples[order[j + 1]].0 == samples[order[i]].0 {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = samples
        .iter()
        .zip(&ranks)
        .filter(|((_, y), _)| *y)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Kendall rank correlation with tie correction (tau-b):
/// (nc - nd) / sqrt((n0 - n1)(n0 - n2)) where n0 = n(n-1)/2 and n1, n2 are
/// the tied-pair counts of each vector.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::InvalidArgs(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(MetricError::InvalidArgs(
            "kendall tau needs at least 2 points".into(),
        ));
    }
    let n = xs.len();
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut ties_x = 0u64;
    let mut ties_y = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i].partial_cmp(&xs[j]).ok_or_else(|| {
                MetricError::InvalidArgs("NaN in kendall tau input".into())
            })?;
            let dy = ys[i].partial_cmp(&ys[j]).ok_or_else(|| {
                MetricError::InvalidArgs("NaN in kendall tau input".into())
            })?;
            use std::cmp::Ordering::*;
            match (dx, dy) {
                (Equal, Equal) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (Equal, _) => ties_x += 1,
                (_, Equal) => ties_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let denom_x = n0 - ties_x as f64;
    let denom_y = n0 - ties_y as f64;
    if denom_x == 0.0 || denom_y == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((concordant as f64 - discordant as f64) / (denom_x * denom_y).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision/recall/F1 from confusion counts of a binary equivalence judge
/// (prediction: all subgoals complete; gold: final success).
pub fn equivalence_metrics(
    tp: usize,
    fp: usize,
    false_neg: usize,
) -> Result<PrfMetrics, MetricError> {
    if tp + fp == 0 {
        return Err(MetricError::NoPredictedPositives);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = if tp + false_neg == 0 {
        0.0
    } else {
        tp as f64 / (tp + false_neg) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PrfMetrics {
        precision,
        recall,
        f1,
    })
}

/// Confusion counts from parallel (predicted, gold) label slices.
pub fn equivalence_metrics_from_labels(
    predicted: &[bool],
    gold: &[bool],
) -> Result<PrfMetrics, MetricError> {
    if predicted.len() != gold.len() {
        return Err(MetricError::InvalidArgs(format!(
            "length mismatch: {} vs {}",
            predicted.len(),
            gold.len()
        )));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut false_neg = 0;
    for (&p, &g) in predicted.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => false_neg += 1,
            (false, false) => {}
        }
    }
    equivalence_metrics(tp, fp, false_neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC curve points for plotting, one per distinct score threshold, from
/// (0, 0) down to (1, 1). Scores tied at a threshold enter together.
pub fn roc_points(samples: &[(f64, bool)]) -> Result<Vec<RocPoint>, MetricError> {
    let n_pos = samples.iter().filter(|(_, y)| *y).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: score,
            tpr: tp as f64 / n_pos as f64,
            fpr: fp as f64 / n_neg as f64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub success_rate: f64,
}

/// Empirical success probability per completed-subgoal count m in {0..K}.
/// Bins with zero traces are absent from the map.
pub fn calibration_curve(
    samples: &[(usize, f64)],
    k: usize,
) -> Result<std::collections::BTreeMap<usize, CalibrationBin>, MetricError> {
    let mut out: std::collections::BTreeMap<usize, CalibrationBin> =
        std::collections::BTreeMap::new();
    for &(m, y) in samples {
        if m > k {
            return Err(MetricError::InvalidArgs(format!(
                "completed count {m} exceeds K = {k}"
            )));
        }
        let bin = out.entry(m).or_insert(CalibrationBin {
            count: 0,
            success_rate: 0.0,
        });
        bin.count += 1;
        bin.success_rate += y;
    }
    for bin in out.values_mut() {
        bin.success_rate /= bin.count as f64;
    }
    Ok(out)
}
