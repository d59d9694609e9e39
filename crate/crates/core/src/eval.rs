//! Evaluation metrics and statistical tests.
//!
//! Classification metrics follow the patch-correctness convention: a
//! positive is a correct patch, `+Recall = TP / (TP + FN)` measures how many
//! correct patches are kept and `-Recall = TN / (TN + FP)` how many incorrect
//! patches are filtered out. A pair is predicted correct when its score is
//! at least the threshold.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0} is undefined: denominator is zero")]
    Undefined(&'static str),
    #[error("AUC needs at least one positive and one negative")]
    SingleClass,
    #[error("each sample needs at least 3 values (got {0} and {1})")]
    SampleTooSmall(usize, usize),
    #[error("all values are identical; the rank test has zero variance")]
    ZeroVariance,
    #[error("pair {index}: vectors have dimensions {left} and {right}")]
    DimMismatch {
        index: usize,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Tallies predictions `score >= t` against labels.
pub fn confusion_at(scores: &[(f64, bool)], t: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for &(s, label) in scores {
        match (s >= t, label) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    cm
}

/// Share of correct patches that are recalled.
pub fn plus_recall(cm: &ConfusionMatrix) -> Result<f64, MetricError> {
    let d = cm.tp + cm.fn_;
    if d == 0 {
        return Err(MetricError::Undefined("+Recall"));
    }
    Ok(cm.tp as f64 / d as f64)
}

/// Share of incorrect patches that are filtered out.
pub fn minus_recall(cm: &ConfusionMatrix) -> Result<f64, MetricError> {
    let d = cm.tn + cm.fp;
    if d == 0 {
        return Err(MetricError::Undefined("-Recall"));
    }
    Ok(cm.tn as f64 / d as f64)
}

pub fn f1(cm: &ConfusionMatrix) -> Result<f64, MetricError> {
    let d = 2 * cm.tp + cm.fp + cm.fn_;
    if d == 0 {
        return Err(MetricError::Undefined("F1"));
    }
    Ok(2.0 * cm.tp as f64 / d as f64)
}

fn total_cmp(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// 1-based ranks of `values`, ties sharing their mean rank. Also returns
/// the tie-group sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| total_cmp(&values[a], &values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64, MetricError> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let values: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let (ranks, _) = midranks(&values);
    let rank_sum: f64 = ranks.iter().zip(scores).filter(|(_, s)| s.1).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwwResult {
    /// `U` of the first sample: pairs with `a > b`, ties counted one half.
    pub u_statistic: f64,
    pub z: f64,
    /// Two-sided, normal approximation with tie-corrected variance.
    pub p_value: f64,
}

/// Mann–Whitney–Wilcoxon rank-sum test.
pub fn mww_test(a: &[f64], b: &[f64]) -> Result<MwwResult, MetricError> {
    let (na, nb) = (a.len(), b.len());
    if na < 3 || nb < 3 {
        return Err(MetricError::SampleTooSmall(na, nb));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let (naf, nbf) = (na as f64, nb as f64);
    let n = naf + nbf;
    let u = rank_sum_a - naf * (naf + 1.0) / 2.0;
    let mean = naf * nbf / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = naf * nbf / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let z = (u - mean) / var.sqrt();
    // 2 * (1 - Phi(|z|)) written with erfc to keep precision in the tail.
    let p_value = erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
    Ok(MwwResult {
        u_statistic: u,
        z,
        p_value,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(total_cmp);
    let n = v.len();
    Some(if n.is_multiple_of(2) {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    } else {
        v[n / 2]
    })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStudy {
    pub original_distances: Vec<f64>,
    pub random_distances: Vec<f64>,
    pub original_median: f64,
    pub random_median: f64,
    /// Original distances as the first sample.
    pub test: MwwResult,
    /// True when original pairs are closer than random pairs in the rank
    /// sense (`U` below its null mean).
    pub original_closer: bool,
}

/// Distance distributions of matched and random pairs, compared with the
/// rank-sum test. Vectors are expected to be standardized already.
pub fn euclidean_distance_study(
    original: &[(Vec<f64>, Vec<f64>)],
    random: &[(Vec<f64>, Vec<f64>)],
) -> Result<DistanceStudy, MetricError> {
    let distances = |pairs: &[(Vec<f64>, Vec<f64>)], offset: usize| {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                if a.len() != b.len() {
                    return Err(MetricError::DimMismatch {
                        index: offset + i,
                        left: a.len(),
                        right: b.len(),
                    });
                }
                Ok(euclidean(a, b))
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let original_distances = distances(original, 0)?;
    let random_distances = distances(random, original.len())?;
    let test = mww_test(&original_distances, &random_distances)?;
    let null_mean = original.len() as f64 * random.len() as f64 / 2.0;
    Ok(DistanceStudy {
        original_median: median(&original_distances).unwrap_or(f64::NAN),
        random_median: median(&random_distances).unwrap_or(f64::NAN),
        original_closer: test.u_statistic < null_mean,
        original_distances,
        random_distances,
        test,
    })
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub plus_recall: Option<f64>,
    pub minus_recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub rows: Vec<SweepRow>,
    pub auc: Option<f64>,
}

impl ThresholdSweep {
    /// Row maximizing `+Recall + -Recall`; the lowest threshold wins ties.
    pub fn best_row(&self) -> Option<&SweepRow> {
        let mut best: Option<(&SweepRow, f64)> = None;
        for row in &self.rows {
            let (Some(p), Some(m)) = (row.plus_recall, row.minus_recall) else {
                continue;
            };
            if best.is_none_or(|(_, j)| p + m > j) {
                best = Some((row, p + m));
            }
        }
        best.map(|(r, _)| r)
    }
}

/// Thresholds 0.1, 0.2, ..., 0.9.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

pub fn threshold_sweep(scores: &[(f64, bool)], thresholds: &[f64]) -> ThresholdSweep {
    let rows = thresholds
        .iter()
        .map(|&t| {
            let cm = confusion_at(scores, t);
            SweepRow {
                threshold: t,
                confusion: cm,
                plus_recall: plus_recall(&cm).ok(),
                minus_recall: minus_recall(&cm).ok(),
                f1: f1(&cm).ok(),
            }
        })
        .collect();
    ThresholdSweep {
        rows,
        auc: auc(scores).ok(),
    }
}
