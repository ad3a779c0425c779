//! Timestamp-level AUC and Brier score, encounter-level confusion counts, and
//! mean ± standard error across runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::PREDICTION_WINDOW_HOURS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("AUC needs both classes (got {positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("score {0} is not a finite probability")]
    InvalidScore(f64),
    #[error("positive encounter {0} has no event time")]
    MissingT0(String),
    #[error("no values to aggregate")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTimestamp {
    pub encounter_id: String,
    pub time: f64,
    pub score: f64,
    pub label: f64,
    /// Encounter-level outcome.
    pub positive_encounter: bool,
    pub t0: Option<f64>,
}

fn check(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(MetricError::InvalidScore(s));
    }
    Ok(())
}

/// Mann–Whitney statistic from midranks; tied pairs count ½.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricError::InvalidScore(s));
    }
    let positives = labels.iter().filter(|&&l| l > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] > 0.5 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn brier(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(s, l)| (s - l).powi(2))
        .sum::<f64>()
        / scores.len() as f64)
}

/// Encounter-level counts. A positive encounter is exactly one of TP/FN for its
/// window and may additionally add one FP for an alarm outside the window, so
/// `tp + fn == positive encounters` and `tn + fp >= negative encounters`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// FPs raised by positive encounters outside their window.
    pub fp_from_positive: usize,
}

pub fn encounter_confusion(scored: &[ScoredTimestamp], threshold: f64) -> Result<ConfusionReport> {
    let mut groups: BTreeMap<&str, Vec<&ScoredTimestamp>> = BTreeMap::new();
    for s in scored {
        groups.entry(s.encounter_id.as_str()).or_default().push(s);
    }
    let (mut tp, mut fp, mut fn_, mut tn, mut fp_pos) = (0, 0, 0, 0, 0);
    for (id, rows) in groups {
        let positive = rows[0].positive_encounter;
        if positive {
            let t0 = rows[0].t0.ok_or_else(|| MetricError::MissingT0(id.to_string()))?;
            let in_window = |t: f64| t > t0 - PREDICTION_WINDOW_HOURS && t <= t0;
            let hit = rows.iter().any(|r| in_window(r.time) && r.score >= threshold);
            let stray = rows.iter().any(|r| !in_window(r.time) && r.score >= threshold);
            if hit {
                tp += 1;
            } else {
                fn_ += 1;
            }
            if stray {
                fp += 1;
                fp_pos += 1;
            }
        } else if rows.iter().any(|r| r.score >= threshold) {
            fp += 1;
        } else {
            tn += 1;
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    Ok(ConfusionReport {
        tp,
        fp,
        fn_,
        tn,
        threshold,
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp - fp_pos),
        fp_from_positive: fp_pos,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub se: f64,
    pub runs: usize,
    pub single_run: bool,
}

/// Mean and sample-std/√R.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let r = values.len();
    if r == 0 {
        return Err(MetricError::Empty);
    }
    let mean = values.iter().sum::<f64>() / r as f64;
    let se = if r == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
        (var / r as f64).sqrt()
    };
    Ok(Aggregate {
        mean,
        se,
        runs: r,
        single_run: r == 1,
    })
}

/// Threshold maximizing sensitivity + specificity − 1 over the observed scores.
pub fn youden_threshold(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, 1.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let j = tp as f64 / positives as f64 - fp as f64 / negatives as f64;
        if j > best.0 {
            best = (j, s);
        }
    }
    Ok(best.1)
}

/// Method report as written by the adapt command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub site: String,
    pub auc_mean: f64,
    pub auc_se: f64,
    pub brier_mean: f64,
    pub brier_se: f64,
    pub confusion: ConfusionReport,
    pub runs: usize,
}
