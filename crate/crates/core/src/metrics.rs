//! Evaluation arithmetic: protection rate, top-k accuracy, detection
//! metrics, and cross-trial aggregation.
//!
//! AUC uses the exact rank-statistic (Mann–Whitney) formulation with ties
//! counted half — unambiguous where trapezoidal ROC integration is not.
//! Aggregation sorts its inputs before summing, so every metric here is
//! permutation-invariant down to the last bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recognizer::Prediction;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("k={k} exceeds ranked list length {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("prediction/label counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reports are not homogeneous: {0}")]
    Heterogeneous(String),
}

/// Mean ± sample standard deviation over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// A single observation: std 0 by convention.
    pub fn point(v: f64) -> Self {
        Stat { mean: v, std: 0.0 }
    }
}

/// Detector quality at threshold 0.5, plus threshold-free AUC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub accuracy: Stat,
    pub precision: Stat,
    pub recall: Stat,
    pub auc: Stat,
}

impl DetectionMetrics {
    pub fn to_stats(self) -> DetectionStats {
        DetectionStats {
            accuracy: Stat::point(self.accuracy),
            precision: Stat::point(self.precision),
            recall: Stat::point(self.recall),
            auc: Stat::point(self.auc),
        }
    }
}

/// One evaluation report. Scenarios populate the fields that apply; absent
/// fields stay `None` and aggregation requires the same shape everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_trials: usize,
    pub protection_rate: Option<Stat>,
    pub clean_error: Option<Stat>,
    /// top-k accuracy per k.
    pub topk_accuracy: BTreeMap<u32, Stat>,
    pub routing_fraction: Option<Stat>,
    pub detection: Option<DetectionStats>,
}

impl EvalReport {
    pub fn empty() -> Self {
        EvalReport {
            n_trials: 1,
            protection_rate: None,
            clean_error: None,
            topk_accuracy: BTreeMap::new(),
            routing_fraction: None,
            detection: None,
        }
    }
}

/// Fraction of predictions whose rank-1 label differs from the true label —
/// the attack-success (privacy-protection) measure.
pub fn protection_rate(preds: &[Prediction], true_label: u32) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let wrong = preds.iter().filter(|p| p.top1() != true_label).count();
    Ok(wrong as f64 / preds.len() as f64)
}

/// Fraction of predictions whose first k labels contain the true label.
/// Duplicate labels in the ranked list count once.
pub fn topk_accuracy(
    preds: &[Prediction],
    labels: &[u32],
    k: usize,
) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), labels.len()));
    }
    for p in preds {
        if p.labels.len() < k {
            return Err(MetricsError::KTooLarge { k, len: p.labels.len() });
        }
    }
    let hits = preds
        .iter()
        .zip(labels.iter())
        .filter(|(p, &y)| p.labels[..k].contains(&y))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Accuracy / precision / recall at threshold 0.5 and rank-statistic AUC,
/// from `(score, is_perturbed)` pairs.
pub fn detection_metrics(scores: &[(f64, bool)]) -> Result<DetectionMetrics, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n_pos = scores.iter().filter(|(_, y)| *y).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fna = 0usize;
    for &(s, y) in scores {
        let flagged = s > 0.5;
        match (flagged, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fna += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + fna) as f64;

    // Mann–Whitney U with average ranks for ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0).then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].0 == scores[order[i]].0 {
            j += 1;
        }
        // Ranks are 1-based; tied scores share the average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if scores[idx].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    let auc = u / (n_pos as f64 * n_neg as f64);

    Ok(DetectionMetrics { accuracy, precision, recall, auc })
}

fn agg_values(values: &[f64]) -> Stat {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Stat { mean, std }
}

fn agg_field(
    name: &str,
    fields: Vec<Option<f64>>,
) -> Result<Option<Stat>, MetricsError> {
    let present: Vec<f64> = fields.iter().filter_map(|v| *v).collect();
    if present.is_empty() {
        return Ok(None);
    }
    if present.len() != fields.len() {
        return Err(MetricsError::Heterogeneous(format!(
            "field `{name}` present in {} of {} reports",
            present.len(),
            fields.len()
        )));
    }
    Ok(Some(agg_values(&present)))
}

/// Unweighted mean and sample standard deviation per field across trial
/// reports. Input order never matters.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n_trials = reports.iter().map(|r| r.n_trials).sum();
    let protection_rate = agg_field(
        "protection_rate",
        reports.iter().map(|r| r.protection_rate.map(|s| s.mean)).collect(),
    )?;
    let clean_error = agg_field(
        "clean_error",
        reports.iter().map(|r| r.clean_error.map(|s| s.mean)).collect(),
    )?;
    let routing_fraction = agg_field(
        "routing_fraction",
        reports.iter().map(|r| r.routing_fraction.map(|s| s.mean)).collect(),
    )?;

    let mut topk_accuracy = BTreeMap::new();
    let ks: Vec<u32> = reports[0].topk_accuracy.keys().copied().collect();
    for r in reports {
        let rks: Vec<u32> = r.topk_accuracy.keys().copied().collect();
        if rks != ks {
            return Err(MetricsError::Heterogeneous(format!(
                "top-k keys differ: {ks:?} vs {rks:?}"
            )));
        }
    }
    for k in ks {
        let vals: Vec<f64> = reports.iter().map(|r| r.topk_accuracy[&k].mean).collect();
        topk_accuracy.insert(k, agg_values(&vals));
    }

    let detection = {
        let present: Vec<&DetectionStats> =
            reports.iter().filter_map(|r| r.detection.as_ref()).collect();
        if present.is_empty() {
            None
        } else if present.len() != reports.len() {
            return Err(MetricsError::Heterogeneous(
                "field `detection` present in only some reports".into(),
            ));
        } else {
            Some(DetectionStats {
                accuracy: agg_values(&present.iter().map(|d| d.accuracy.mean).collect::<Vec<_>>()),
                precision: agg_values(&present.iter().map(|d| d.precision.mean).collect::<Vec<_>>()),
                recall: agg_values(&present.iter().map(|d| d.recall.mean).collect::<Vec<_>>()),
                auc: agg_values(&present.iter().map(|d| d.auc.mean).collect::<Vec<_>>()),
            })
        }
    };

    Ok(EvalReport {
        n_trials,
        protection_rate,
        clean_error,
        topk_accuracy,
        routing_fraction,
        detection,
    })
}
