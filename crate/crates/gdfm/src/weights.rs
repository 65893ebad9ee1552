//! Action weighting: joint counting, conditional entropy, and the
//! informativeness-decay weights that scale each action's proxy loss.

use serde::{Deserialize, Serialize};

use crate::core::ClickEvent;
use crate::error::{Error, Result};

/// Additive smoothing mass per joint cell when turning counts into a
/// distribution.
pub const SMOOTH_EPS: f64 = 0.5;

/// Joint distribution over (action outcome, label): `p[a * n_labels + y]`,
/// rows indexed by the action outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    pub k: usize,
    pub n_labels: usize,
    p: Vec<f64>,
}

impl JointDist {
    pub fn new(k: usize, n_labels: usize, p: Vec<f64>) -> Result<Self> {
        if k == 0 || n_labels == 0 || p.len() != k * n_labels {
            return Err(Error::ShapeMismatch(format!(
                "joint needs {k}x{n_labels} entries, got {}",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::ShapeMismatch("joint entries must be finite and >= 0".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::ShapeMismatch(format!("joint sums to {sum}, expected 1")));
        }
        Ok(JointDist { k, n_labels, p })
    }

    pub fn prob(&self, a: usize, y: usize) -> f64 {
        self.p[a * self.n_labels + y]
    }

    pub fn action_marginal(&self, a: usize) -> f64 {
        (0..self.n_labels).map(|y| self.prob(a, y)).sum()
    }
}

/// Conditional entropy `H(y | a)` in nats:
/// `sum_{a,y} p(a,y) ln(p(a) / p(a,y))`, with empty cells contributing 0.
pub fn conditional_entropy(joint: &JointDist) -> f64 {
    let mut h = 0.0;
    for a in 0..joint.k {
        let pa = joint.action_marginal(a);
        if pa <= 0.0 {
            continue;
        }
        for y in 0..joint.n_labels {
            let pay = joint.prob(a, y);
            if pay > 0.0 {
                h += pay * (pa / pay).ln();
            }
        }
    }
    h
}

/// Raw (action outcome, label) counts for one action over labeled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCounts {
    pub k: u32,
    counts: Vec<u64>,
    pub total: u64,
}

impl JointCounts {
    pub fn new(k: u32) -> Self {
        JointCounts { k, counts: vec![0; k as usize * 2], total: 0 }
    }

    pub fn add(&mut self, a: u32, y: bool) {
        self.counts[a as usize * 2 + usize::from(y)] += 1;
        self.total += 1;
    }

    pub fn count(&self, a: u32, y: bool) -> u64 {
        self.counts[a as usize * 2 + usize::from(y)]
    }

    pub fn merge(&mut self, other: &JointCounts) {
        debug_assert_eq!(self.k, other.k);
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        self.total += other.total;
    }

    /// Add-epsilon smoothed distribution; defined even with zero counts.
    pub fn smoothed(&self) -> JointDist {
        let cells = self.counts.len() as f64;
        let denom = self.total as f64 + SMOOTH_EPS * cells;
        let p = self.counts.iter().map(|&c| (c as f64 + SMOOTH_EPS) / denom).collect();
        JointDist { k: self.k as usize, n_labels: 2, p }
    }

    /// Unsmoothed empirical distribution. Errors on zero total.
    pub fn empirical(&self) -> Result<JointDist> {
        if self.total == 0 {
            return Err(Error::InsufficientData("no labeled samples counted".into()));
        }
        let denom = self.total as f64;
        let p = self.counts.iter().map(|&c| c as f64 / denom).collect();
        Ok(JointDist { k: self.k as usize, n_labels: 2, p })
    }
}

/// Counts the joint of action `action_idx`'s outcome against the matured
/// label over the given clicks.
pub fn estimate_joint(clicks: &[ClickEvent], action_idx: usize, cardinality: u32) -> Result<JointCounts> {
    if clicks.is_empty() {
        return Err(Error::EmptyInput("no clicks to estimate a joint from".into()));
    }
    let mut counts = JointCounts::new(cardinality);
    for c in clicks {
        let a = *c.actions.get(action_idx).ok_or_else(|| {
            Error::ShapeMismatch(format!("click {} has no action index {action_idx}", c.sample_id))
        })?;
        if a >= cardinality {
            return Err(Error::ShapeMismatch(format!(
                "click {} action {action_idx} outcome {a} exceeds cardinality {cardinality}",
                c.sample_id
            )));
        }
        counts.add(a, c.converts);
    }
    Ok(counts)
}

/// Informativeness weight `exp(-alpha * H(y|a))`.
pub fn w_info(entropy: f64, alpha: f64) -> f64 {
    (-alpha * entropy).exp()
}

/// Decay weight `exp(-beta * delta / delta_y)`, the delay measured as a
/// fraction of the label maturation horizon.
pub fn w_time(delay: f64, delta_y: f64, beta: f64) -> f64 {
    (-beta * delay / delta_y).exp()
}

/// Per-action training weights, aligned with the action spec order,
/// normalized to mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn get(&self, action_id: u32) -> f64 {
        self.weights[action_id as usize]
    }
}

/// Combines entropy and delay into per-action weights and normalizes them
/// to mean 1.
pub fn combine_and_normalize(
    entropies: &[f64],
    delays: &[f64],
    delta_y: f64,
    alpha: f64,
    beta: f64,
) -> Result<WeightVector> {
    if entropies.is_empty() || entropies.len() != delays.len() {
        return Err(Error::ShapeMismatch(format!(
            "need matching non-empty entropy/delay lists, got {} and {}",
            entropies.len(),
            delays.len()
        )));
    }
    if !(delta_y > 0.0) || !delta_y.is_finite() {
        return Err(Error::config("delta_y", "label maturation delay must be positive and finite"));
    }
    if !alpha.is_finite() || !beta.is_finite() || alpha < 0.0 || beta < 0.0 {
        return Err(Error::config("alpha/beta", "weight exponents must be finite and >= 0"));
    }
    let raw: Vec<f64> = entropies
        .iter()
        .zip(delays)
        .map(|(&h, &d)| w_info(h, alpha) * w_time(d, delta_y, beta))
        .collect();
    if raw.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite { context: "raw action weights".into() });
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::NonFinite { context: "weight normalization (zero mean)".into() });
    }
    Ok(WeightVector { weights: raw.iter().map(|w| w / mean).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::FeatureVector;

    fn click(a: u32, y: bool) -> ClickEvent {
        ClickEvent {
            sample_id: 0,
            click_time_hours: 0.0,
            features: FeatureVector::new(vec![0]),
            converts: y,
            conversion_delay_hours: if y { Some(1.0) } else { None },
            actions: vec![a, u32::from(y)],
        }
    }

    #[test]
    fn joint_counting_matches_hand_example() {
        let mut clicks = Vec::new();
        for _ in 0..3 {
            clicks.push(click(1, true));
        }
        for _ in 0..7 {
            clicks.push(click(0, false));
        }
        let counts = estimate_joint(&clicks, 0, 2).unwrap();
        assert_eq!(counts.count(0, false), 7);
        assert_eq!(counts.count(1, true), 3);
        assert_eq!(counts.count(0, true), 0);
        assert_eq!(counts.count(1, false), 0);
        assert_eq!(counts.total, 10);

        let sm = counts.smoothed();
        assert!((sm.prob(0, 0) - 7.5 / 12.0).abs() < 1e-15);
        assert!((sm.prob(1, 1) - 3.5 / 12.0).abs() < 1e-15);
        assert!((sm.prob(0, 1) - 0.5 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_matches_hand_joint() {
        // Flip channel with keep probability 0.9 at base rate 0.3.
        let joint = JointDist::new(2, 2, vec![0.63, 0.03, 0.07, 0.27]).unwrap();
        let h = conditional_entropy(&joint);
        let h_joint = -[0.63f64, 0.03, 0.07, 0.27].iter().map(|p| p * p.ln()).sum::<f64>();
        let h_a = -[0.66f64, 0.34].iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((h - (h_joint - h_a)).abs() < 1e-12);
        assert!((h - 0.2949).abs() < 1e-4);
    }

    #[test]
    fn entropy_of_independent_channel_is_label_entropy() {
        let joint = JointDist::new(2, 2, vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert!((conditional_entropy(&joint) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_deterministic_channel_is_zero() {
        let joint = JointDist::new(2, 2, vec![0.7, 0.0, 0.0, 0.3]).unwrap();
        assert_eq!(conditional_entropy(&joint), 0.0);
    }

    #[test]
    fn entropy_is_nonnegative_and_bounded_by_label_entropy() {
        let joint = JointDist::new(3, 2, vec![0.2, 0.1, 0.15, 0.25, 0.05, 0.25]).unwrap();
        let h = conditional_entropy(&joint);
        let py1: f64 = 0.1 + 0.25 + 0.25;
        let hy = -(py1 * py1.ln() + (1.0 - py1) * (1.0 - py1).ln());
        assert!(h >= 0.0);
        assert!(h <= hy + 1e-12);
    }

    #[test]
    fn weight_factors_match_hand_values() {
        assert!((w_info(0.529, 2.0) - (-1.058f64).exp()).abs() < 1e-15);
        assert!((w_info(0.529, 2.0) - 0.3472).abs() < 1e-4);
        assert!((w_time(12.0, 24.0, 1.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((w_time(12.0, 24.0, 1.0) - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn combine_normalizes_to_mean_one() {
        // H = [0.2, 0.5], normalized delays [0.1, 0.9], alpha 2, beta 1:
        // raw weights e^{-0.5}, e^{-1.9}.
        let wv = combine_and_normalize(&[0.2, 0.5], &[0.1, 0.9], 1.0, 2.0, 1.0).unwrap();
        let raw = [(-0.5f64).exp(), (-1.9f64).exp()];
        let mean = (raw[0] + raw[1]) / 2.0;
        assert!((wv.get(0) - raw[0] / mean).abs() < 1e-12);
        assert!((wv.get(1) - raw[1] / mean).abs() < 1e-12);
        assert!((wv.get(0) - 1.6043).abs() < 1e-4);
        assert!((wv.get(1) - 0.3957).abs() < 1e-4);
        let m = (wv.get(0) + wv.get(1)) / 2.0;
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combine_rejects_bad_inputs() {
        assert!(combine_and_normalize(&[], &[], 1.0, 2.0, 1.0).is_err());
        assert!(combine_and_normalize(&[0.1], &[0.1, 0.2], 1.0, 2.0, 1.0).is_err());
        assert!(combine_and_normalize(&[0.1], &[0.1], 0.0, 2.0, 1.0).is_err());
        assert!(combine_and_normalize(&[0.1], &[0.1], 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn smoothed_joint_is_defined_on_empty_counts() {
        let counts = JointCounts::new(2);
        let sm = counts.smoothed();
        for a in 0..2 {
            for y in 0..2 {
                assert!((sm.prob(a, y) - 0.25).abs() < 1e-15);
            }
        }
    }
}
