//! Ranking and likelihood metrics plus the aggregated evaluation report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve via the rank-sum statistic with tie-averaged
/// ranks. Returns `None` when either class is absent or fewer than two
/// samples are given.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = n - n_pos;
    if n < 2 || n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; every member of a tie group gets the average.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: precision at each positive hit, averaged over
/// positives, with samples ranked by descending score and ties broken by
/// stable input order. Returns `None` without positives.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || scores.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut sum = 0.0f64;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            tp += 1;
            sum += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

/// Mean negative log-likelihood of Bernoulli labels under the given
/// probabilities. Scores are clamped away from 0 and 1 defensively.
pub fn nll(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    if scores.is_empty() {
        return Err(Error::EmptyInput("nll of an empty sample".into()));
    }
    let mut sum = 0.0f64;
    for (&s, &y) in scores.iter().zip(labels) {
        let s = s.clamp(1e-15, 1.0 - 1e-15);
        sum -= if y { s.ln() } else { (1.0 - s).ln() };
    }
    Ok(sum / scores.len() as f64)
}

/// Fraction of the pretrain-to-oracle gap recovered, in percent:
/// `(metric - pretrain) / (oracle - pretrain) * 100`.
pub fn relative_improvement(metric: f64, pretrain: f64, oracle: f64) -> Result<f64> {
    let gap = oracle - pretrain;
    if gap == 0.0 {
        return Err(Error::ZeroAnchorGap);
    }
    Ok((metric - pretrain) / gap * 100.0)
}

/// Per-hour metric values; `None` marks hours where the metric is
/// undefined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HourlyMetrics {
    pub hour: u32,
    pub n: usize,
    pub n_pos: usize,
    pub auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub nll: Option<f64>,
}

/// Streaming evaluation report: per-hour rows plus averages over the hours
/// where each metric is defined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hours: Vec<HourlyMetrics>,
    pub avg_auc: Option<f64>,
    pub avg_pr_auc: Option<f64>,
    pub avg_nll: Option<f64>,
    /// Hours skipped per metric because the metric was undefined there.
    pub skipped_hours_auc: u32,
    pub skipped_hours_pr_auc: u32,
    pub skipped_hours_nll: u32,
}

impl MetricsReport {
    /// Evaluates one (scores, labels) batch per hour and averages each
    /// metric over the hours where it is defined. An hour with fewer than
    /// two samples or a single class yields no ranking metrics.
    pub fn from_hours(rows: Vec<(u32, Vec<f64>, Vec<bool>)>) -> Result<MetricsReport> {
        let mut hours = Vec::with_capacity(rows.len());
        for (hour, scores, labels) in rows {
            let (a, p, l) = if scores.is_empty() {
                (None, None, None)
            } else {
                (auc(&scores, &labels), pr_auc(&scores, &labels), Some(nll(&scores, &labels)?))
            };
            hours.push(HourlyMetrics { hour, n: scores.len(), n_pos: labels.iter().filter(|&&y| y).count(), auc: a, pr_auc: p, nll: l });
        }
        let average = |get: &dyn Fn(&HourlyMetrics) -> Option<f64>| {
            let vals: Vec<f64> = hours.iter().filter_map(get).collect();
            let skipped = (hours.len() - vals.len()) as u32;
            let avg = if vals.is_empty() { None } else { Some(vals.iter().sum::<f64>() / vals.len() as f64) };
            (avg, skipped)
        };
        let (avg_auc, skipped_hours_auc) = average(&|h| h.auc);
        let (avg_pr_auc, skipped_hours_pr_auc) = average(&|h| h.pr_auc);
        let (avg_nll, skipped_hours_nll) = average(&|h| h.nll);
        Ok(MetricsReport {
            hours,
            avg_auc,
            avg_pr_auc,
            avg_nll,
            skipped_hours_auc,
            skipped_hours_pr_auc,
            skipped_hours_nll,
        })
    }
}
