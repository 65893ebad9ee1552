//! Information-theoretic diagnostics: conversion-rate recovery from action
//! marginals, total-variation contraction under noisy channels, and the
//! empirical curves that motivate entropy- and delay-based weighting.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::ClickEvent;
use crate::error::{Error, Result};
use crate::losses::{self};
use crate::model::{CvrGrad, CvrModel, CvrOptimizer, ModelDims, OptimizerKind};
use crate::par::{map_indexed, mix_seed, seeded_rng, Parallelism};
use crate::weights::{conditional_entropy, JointDist};

/// Column-stochastic channel matrix `m[a][y] = p(a | y)`, `k` outcomes by
/// `n` label values.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub k: usize,
    pub n: usize,
    m: Vec<f64>,
}

impl ChannelMatrix {
    pub fn new(k: usize, n: usize, entries: Vec<f64>) -> Result<Self> {
        if k == 0 || n == 0 || entries.len() != k * n {
            return Err(Error::ShapeMismatch(format!(
                "channel matrix needs {k}x{n} entries, got {}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < -1e-12 || *v > 1.0 + 1e-12) {
            return Err(Error::ShapeMismatch("channel entries must lie in [0, 1]".into()));
        }
        for y in 0..n {
            let col: f64 = (0..k).map(|a| entries[a * n + y]).sum();
            if (col - 1.0).abs() > 1e-9 {
                return Err(Error::ShapeMismatch(format!("channel column {y} sums to {col}, expected 1")));
            }
        }
        Ok(ChannelMatrix { k, n, m: entries })
    }

    /// Binary-label matrix from a datagen channel table.
    pub fn from_table(table: &[[f64; 2]]) -> Result<Self> {
        let entries = table.iter().flat_map(|row| [row[0], row[1]]).collect();
        ChannelMatrix::new(table.len(), 2, entries)
    }

    pub fn get(&self, a: usize, y: usize) -> f64 {
        self.m[a * self.n + y]
    }

    /// Pushes a label distribution through the channel: `(M p)(a)`.
    pub fn apply(&self, p_y: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|a| (0..self.n).map(|y| self.get(a, y) * p_y[y]).sum())
            .collect()
    }

    /// Joint distribution induced by a label marginal.
    pub fn joint(&self, p_y: &[f64]) -> Result<JointDist> {
        let mut p = Vec::with_capacity(self.k * self.n);
        for a in 0..self.k {
            for y in 0..self.n {
                p.push(self.get(a, y) * p_y[y]);
            }
        }
        JointDist::new(self.k, self.n, p)
    }
}

/// Recovers the label distribution from an observed action marginal by
/// least squares: `p_y` solving `M p_y = p_a`.
///
/// Requires the channel matrix to have full column rank (singular values
/// above `1e-10` of the largest); rejects solutions that leave a residual
/// above `1e-9` or fall outside the probability simplex.
pub fn recover_cvr(channel: &ChannelMatrix, p_a: &[f64]) -> Result<Vec<f64>> {
    if p_a.len() != channel.k {
        return Err(Error::ShapeMismatch(format!(
            "marginal has {} entries, channel has {} outcomes",
            p_a.len(),
            channel.k
        )));
    }
    if p_a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "action marginal".into() });
    }
    let mat = DMatrix::from_fn(channel.k, channel.n, |a, y| channel.get(a, y));
    let svd = mat.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let tol = 1e-10 * smax;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < channel.n {
        return Err(Error::RankDeficient { rank, need: channel.n });
    }
    let b = DVector::from_column_slice(p_a);
    let x = svd
        .solve(&b, tol)
        .map_err(|e| Error::ShapeMismatch(format!("least squares failed: {e}")))?;
    let residual = (&mat * &x - &b).abs().max();
    if residual > 1e-9 {
        return Err(Error::Inconsistent { residual });
    }
    let sum: f64 = x.iter().sum();
    if x.iter().any(|v| *v < -1e-9 || *v > 1.0 + 1e-9) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Inconsistent { residual: (sum - 1.0).abs().max(residual) });
    }
    Ok(x.iter().copied().collect())
}

/// Total variation distance in the `sum |p_i - q_i|` convention.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "distributions of lengths {} and {} are not comparable",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

/// KL divergence between Bernoulli distributions, in nats.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    let q = q.clamp(1e-15, 1.0 - 1e-15);
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with tie-averaged ranks. `None` when either
/// input has no variance or fewer than two points are given.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Monte-Carlo study configuration: random channels of `k` outcomes over
/// `n` label values, label distributions from a flat Dirichlet.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub seed: u64,
    pub n_trials: u64,
    pub k: usize,
    pub n: usize,
    pub hist_bins: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { seed: 0, n_trials: 20_000, k: 4, n: 3, hist_bins: 20 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McTrial {
    /// Conditional entropy H(y|a) of the trial channel under the uniform
    /// label marginal, in nats.
    pub entropy: f64,
    /// Contraction ratio `tv(M p1, M p2) / tv(p1, p2)`.
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McBin {
    pub h_lo: f64,
    pub h_hi: f64,
    pub count: u64,
    pub mean_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McResult {
    pub trials: Vec<McTrial>,
    pub bins: Vec<McBin>,
    /// Trials redrawn because the two label distributions coincided.
    pub resampled: u64,
    /// Spearman correlation between bin entropy and bin mean ratio.
    pub spearman_bins: Option<f64>,
}

fn dirichlet(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let sum: f64 = draws.iter().sum();
    draws.iter().map(|d| d / sum).collect()
}

/// Samples random channels and label-distribution pairs, recording how the
/// channel's conditional entropy relates to its total-variation
/// contraction. Deterministic in the seed on both execution paths.
pub fn mc_entropy_vs_tv(config: &McConfig, par: Parallelism) -> Result<McResult> {
    if config.n_trials == 0 || config.k < 2 || config.n < 2 || config.hist_bins == 0 {
        return Err(Error::config("mc", "need n_trials >= 1, k >= 2, n >= 2, hist_bins >= 1"));
    }
    let (k, n) = (config.k, config.n);
    let uniform = vec![1.0 / n as f64; n];
    let results: Vec<(McTrial, u64)> = map_indexed(par, config.n_trials as usize, |i| {
        let mut rng = seeded_rng(mix_seed(config.seed, i as u64));
        let mut entries = vec![0.0; k * n];
        for y in 0..n {
            let col = dirichlet(k, &mut rng);
            for a in 0..k {
                entries[a * n + y] = col[a];
            }
        }
        let channel = ChannelMatrix::new(k, n, entries).expect("sampled channel is stochastic");
        let mut resampled = 0u64;
        let (p1, p2, tv_in) = loop {
            let p1 = dirichlet(n, &mut rng);
            let p2 = dirichlet(n, &mut rng);
            let tv_in = tv_distance(&p1, &p2).expect("equal lengths");
            if tv_in >= 1e-12 {
                break (p1, p2, tv_in);
            }
            resampled += 1;
        };
        let tv_out = tv_distance(&channel.apply(&p1), &channel.apply(&p2)).expect("equal lengths");
        let joint = channel.joint(&uniform).expect("uniform marginal joint");
        let trial = McTrial { entropy: conditional_entropy(&joint), ratio: tv_out / tv_in };
        (trial, resampled)
    });

    let trials: Vec<McTrial> = results.iter().map(|(t, _)| *t).collect();
    let resampled = results.iter().map(|(_, r)| r).sum();

    let h_max = (n as f64).ln();
    let width = h_max / config.hist_bins as f64;
    let mut sums = vec![(0u64, 0.0f64); config.hist_bins];
    for t in &trials {
        let idx = ((t.entropy / h_max) * config.hist_bins as f64).floor() as usize;
        let idx = idx.min(config.hist_bins - 1);
        sums[idx].0 += 1;
        sums[idx].1 += t.ratio;
    }
    let bins: Vec<McBin> = sums
        .iter()
        .enumerate()
        .filter(|(_, (count, _))| *count > 0)
        .map(|(i, (count, sum))| McBin {
            h_lo: i as f64 * width,
            h_hi: (i + 1) as f64 * width,
            count: *count,
            mean_ratio: sum / *count as f64,
        })
        .collect();
    let centers: Vec<f64> = bins.iter().map(|b| (b.h_lo + b.h_hi) / 2.0).collect();
    let means: Vec<f64> = bins.iter().map(|b| b.mean_ratio).collect();
    let spearman_bins = spearman(&centers, &means);
    Ok(McResult { trials, bins, resampled, spearman_bins })
}

/// Configuration for the temporal-gap fine-tuning curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalGapConfig {
    pub seed: u64,
    pub base_days: u32,
    pub eval_days: u32,
    pub model: ModelDims,
    pub lr: f64,
    pub batch_size: usize,
    pub base_epochs: u32,
    pub passes_per_day: u32,
    /// Every k-th click is held out of training and used to measure the
    /// prediction KL.
    pub holdout_every: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TemporalGapPoint {
    pub day: u32,
    pub mean_kl: f64,
}

fn train_pass(
    model: &mut CvrModel<f32>,
    opt: &mut CvrOptimizer<f32>,
    clicks: &[&ClickEvent],
    order: &mut Vec<usize>,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    order.clear();
    order.extend(0..clicks.len());
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut grad = CvrGrad::zeroed_like(model);
    for chunk in order.chunks(batch_size) {
        grad.reset();
        for &idx in chunk {
            let c = clicks[idx];
            losses::loss_delayed_label(model, &c.features, c.converts, &mut grad)?;
        }
        opt.apply_update(model, &grad, 1.0 / chunk.len() as f64)?;
    }
    Ok(())
}

/// Trains a base model on an initial span of days, then keeps fine-tuning
/// it day by day, recording the mean prediction KL between the base model
/// and the current model on held-out clicks. Day 0 is the base model
/// against itself.
pub fn temporal_gap_curve(clicks: &[ClickEvent], config: &TemporalGapConfig) -> Result<Vec<TemporalGapPoint>> {
    if config.base_days == 0 || config.eval_days == 0 || config.holdout_every < 2 {
        return Err(Error::config("temporal_gap", "need base_days, eval_days >= 1 and holdout_every >= 2"));
    }
    let span = (config.base_days + config.eval_days) as f64 * 24.0;
    let max_t = clicks.iter().map(|c| c.click_time_hours).fold(0.0f64, f64::max);
    if max_t < span {
        return Err(Error::InsufficientData(format!(
            "stream spans {max_t:.1}h, need {span:.1}h for the configured days"
        )));
    }
    let holdout: Vec<&ClickEvent> = clicks
        .iter()
        .enumerate()
        .filter(|(i, _)| i % config.holdout_every == 0)
        .map(|(_, c)| c)
        .collect();
    let train: Vec<&ClickEvent> = clicks
        .iter()
        .enumerate()
        .filter(|(i, _)| i % config.holdout_every != 0)
        .map(|(_, c)| c)
        .collect();
    if holdout.is_empty() {
        return Err(Error::InsufficientData("holdout split is empty".into()));
    }

    let base_span = config.base_days as f64 * 24.0;
    let base_clicks: Vec<&ClickEvent> =
        train.iter().copied().filter(|c| c.click_time_hours < base_span).collect();
    if base_clicks.is_empty() {
        return Err(Error::InsufficientData("no clicks in the base window".into()));
    }

    let mut rng = seeded_rng(mix_seed(config.seed, 0x6A9));
    let mut model = CvrModel::<f32>::init(config.model, &mut rng)?;
    let mut opt = CvrOptimizer::new(OptimizerKind::adam_default(), config.lr, &model);
    let mut order = Vec::new();
    for _ in 0..config.base_epochs {
        train_pass(&mut model, &mut opt, &base_clicks, &mut order, config.batch_size, &mut rng)?;
    }
    let base = model.clone();
    let base_preds: Vec<f64> = holdout.iter().map(|c| base.predict_cvr(&c.features)).collect();

    let mut points = vec![TemporalGapPoint { day: 0, mean_kl: 0.0 }];
    for day in 1..=config.eval_days {
        let lo = base_span + (day - 1) as f64 * 24.0;
        let hi = base_span + day as f64 * 24.0;
        let day_clicks: Vec<&ClickEvent> = train
            .iter()
            .copied()
            .filter(|c| c.click_time_hours >= lo && c.click_time_hours < hi)
            .collect();
        if !day_clicks.is_empty() {
            for _ in 0..config.passes_per_day {
                train_pass(&mut model, &mut opt, &day_clicks, &mut order, config.batch_size, &mut rng)?;
            }
        }
        let mean_kl = holdout
            .iter()
            .zip(&base_preds)
            .map(|(c, &p0)| bernoulli_kl(p0, model.predict_cvr(&c.features)))
            .sum::<f64>()
            / holdout.len() as f64;
        points.push(TemporalGapPoint { day, mean_kl });
    }
    Ok(points)
}

/// Conditional entropy of the early indicator `a = 1[converts within
/// delta]` against the matured label, for each grid delay. Uses the
/// unsmoothed empirical joint.
pub fn entropy_vs_reveal_curve(clicks: &[ClickEvent], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if clicks.is_empty() {
        return Err(Error::EmptyInput("no clicks for the reveal curve".into()));
    }
    if grid.is_empty() || grid.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::config("grid", "delays must be finite and >= 0"));
    }
    let n = clicks.len() as f64;
    let mut out = Vec::with_capacity(grid.len());
    for &delta in grid {
        let mut counts = [[0u64; 2]; 2];
        for c in clicks {
            let a = match c.conversion_delay_hours {
                Some(d) => usize::from(d <= delta),
                None => 0,
            };
            counts[a][usize::from(c.converts)] += 1;
        }
        let p: Vec<f64> = counts.iter().flatten().map(|&c| c as f64 / n).collect();
        let joint = JointDist::new(2, 2, p)?;
        out.push((delta, conditional_entropy(&joint)));
    }
    Ok(out)
}

/// One row of the per-day action stability summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityRow {
    pub day: u32,
    pub n: u64,
    pub n_pos: u64,
    /// Empirical conversion rate; `None` on empty days.
    pub cvr: Option<f64>,
    /// Per action, the empirical `p(a = 1 | y = 1)`; `None` when the day
    /// has no converters.
    pub action_rate_given_pos: Vec<Option<f64>>,
}

/// Summarizes, day by day, how the conversion rate moves while the action
/// channels hold still: the empirical action distribution among
/// converters, per action.
pub fn action_stability_curve(clicks: &[ClickEvent], n_actions: usize) -> Result<Vec<StabilityRow>> {
    if clicks.is_empty() {
        return Err(Error::EmptyInput("no clicks for the stability curve".into()));
    }
    let max_day = clicks
        .iter()
        .map(|c| (c.click_time_hours / 24.0).floor() as u32)
        .max()
        .unwrap();
    let mut rows: Vec<StabilityRow> = (0..=max_day)
        .map(|day| StabilityRow {
            day,
            n: 0,
            n_pos: 0,
            cvr: None,
            action_rate_given_pos: vec![None; n_actions],
        })
        .collect();
    let mut pos_action_ones = vec![vec![0u64; n_actions]; (max_day + 1) as usize];
    for c in clicks {
        if c.actions.len() != n_actions {
            return Err(Error::ShapeMismatch(format!(
                "click {} has {} actions, expected {n_actions}",
                c.sample_id,
                c.actions.len()
            )));
        }
        let day = (c.click_time_hours / 24.0).floor() as usize;
        rows[day].n += 1;
        if c.converts {
            rows[day].n_pos += 1;
            for (j, &a) in c.actions.iter().enumerate() {
                pos_action_ones[day][j] += u64::from(a == 1);
            }
        }
    }
    for (row, ones) in rows.iter_mut().zip(&pos_action_ones) {
        if row.n > 0 {
            row.cvr = Some(row.n_pos as f64 / row.n as f64);
        }
        if row.n_pos > 0 {
            for j in 0..n_actions {
                row.action_rate_given_pos[j] = Some(ones[j] as f64 / row.n_pos as f64);
            }
        }
    }
    Ok(rows)
}
