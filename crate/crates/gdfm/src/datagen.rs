//! Synthetic drifting click streams and conversion-log ingestion.
//!
//! The synthetic world draws a logistic conversion model over hashed
//! feature slots whose weights follow a per-hour random walk, samples
//! exponential conversion delays, and emits side actions through
//! configurable stochastic channels conditioned on the latent label.

use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::core::{ActionSpec, ClickEvent, FeatureVector};
use crate::error::{Error, Result};
use crate::par::{mix_seed, seeded_rng};

const TAG_WORLD: u64 = 0x57;
const TAG_DRIFT: u64 = 0xD1;
const TAG_STREAM: u64 = 0x5E;

/// How one action channel turns the latent label into an outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    /// The conversion label itself, revealed at the maturation horizon.
    Label,
    /// Binary action that copies the label with probability `p` and flips
    /// it otherwise.
    Flip { p: f64 },
    /// Channel table drawn once per world from a flat Dirichlet, one
    /// column per label value. With `bucket_field` set, an independent
    /// table is drawn per feature bin of that field.
    Random { cardinality: u32, bucket_field: Option<u32> },
    /// Explicit column-stochastic table `probs[v][y]`.
    Table { probs: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionGenSpec {
    pub reveal_delay_hours: f64,
    pub channel: ChannelSpec,
}

/// Synthetic world configuration; `gen_world` freezes it into sampled
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_bins: u32,
    pub n_fields: u32,
    /// Standard deviation of the base per-bin logit weights.
    pub weight_scale: f64,
    /// Per-hour standard deviation of the weight random walk; 0 freezes
    /// the world.
    pub drift_step: f64,
    /// Rate of the exponential conversion delay, per hour.
    pub delay_rate_per_hour: f64,
    pub horizon_hours: f64,
    pub n_clicks: u64,
    pub actions: Vec<ActionGenSpec>,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::config("n_bins", "need at least 2 bins"));
        }
        if self.n_fields == 0 {
            return Err(Error::config("n_fields", "need at least 1 field"));
        }
        if !self.weight_scale.is_finite() || self.weight_scale < 0.0 {
            return Err(Error::config("weight_scale", "must be finite and >= 0"));
        }
        if !self.drift_step.is_finite() || self.drift_step < 0.0 {
            return Err(Error::config("drift_step", "must be finite and >= 0"));
        }
        if !(self.delay_rate_per_hour > 0.0) || !self.delay_rate_per_hour.is_finite() {
            return Err(Error::config("delay_rate_per_hour", "must be positive and finite"));
        }
        if !(self.horizon_hours > 0.0) || !self.horizon_hours.is_finite() {
            return Err(Error::config("horizon_hours", "must be positive and finite"));
        }
        if self.n_clicks == 0 {
            return Err(Error::config("n_clicks", "need at least 1 click"));
        }
        let mut labels = 0;
        for (j, a) in self.actions.iter().enumerate() {
            let field = format!("actions[{j}]");
            if !a.reveal_delay_hours.is_finite() || a.reveal_delay_hours < 0.0 {
                return Err(Error::config(&field, "reveal_delay_hours must be finite and >= 0"));
            }
            match &a.channel {
                ChannelSpec::Label => {
                    labels += 1;
                    if !(a.reveal_delay_hours > 0.0) {
                        return Err(Error::config(&field, "label reveal delay must be positive"));
                    }
                }
                ChannelSpec::Flip { p } => {
                    if !p.is_finite() || !(0.0..=1.0).contains(p) {
                        return Err(Error::config(&field, "flip probability must lie in [0, 1]"));
                    }
                }
                ChannelSpec::Random { cardinality, bucket_field } => {
                    if *cardinality < 2 {
                        return Err(Error::config(&field, "cardinality must be >= 2"));
                    }
                    if let Some(f) = bucket_field {
                        if *f >= self.n_fields {
                            return Err(Error::config(&field, format!("bucket_field {f} out of range")));
                        }
                    }
                }
                ChannelSpec::Table { probs } => {
                    if probs.len() < 2 {
                        return Err(Error::config(&field, "table needs cardinality >= 2"));
                    }
                    for (v, row) in probs.iter().enumerate() {
                        if row.len() != 2 {
                            return Err(Error::config(&field, format!("table row {v} must have 2 columns")));
                        }
                        if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                            return Err(Error::config(&field, format!("table row {v} entries must lie in [0, 1]")));
                        }
                    }
                    for y in 0..2 {
                        let col: f64 = probs.iter().map(|row| row[y]).sum();
                        if (col - 1.0).abs() > 1e-12 {
                            return Err(Error::config(&field, format!("table column {y} sums to {col}, expected 1")));
                        }
                    }
                }
            }
        }
        if labels != 1 {
            return Err(Error::config("actions", "exactly one label channel is required"));
        }
        Ok(())
    }
}

/// A frozen action channel: `tables[bucket][v][y] = p(a = v | y)`. Global
/// channels hold a single bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChannel {
    pub cardinality: u32,
    pub bucket_field: Option<u32>,
    pub tables: Vec<Vec<[f64; 2]>>,
}

impl ActionChannel {
    pub fn table(&self, bucket: u32) -> &[[f64; 2]] {
        if self.tables.len() == 1 {
            &self.tables[0]
        } else {
            &self.tables[bucket as usize]
        }
    }

    fn sample(&self, bucket: u32, y: bool, rng: &mut impl Rng) -> u32 {
        let table = self.table(bucket);
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (v, row) in table.iter().enumerate() {
            cum += row[usize::from(y)];
            if u < cum {
                return v as u32;
            }
        }
        (table.len() - 1) as u32
    }
}

/// Fully sampled synthetic world: logistic weights (with their drift
/// trajectory), delay distribution, and frozen action channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub seed: u64,
    pub n_bins: u32,
    pub n_fields: u32,
    pub drift_step: f64,
    pub delay_rate_per_hour: f64,
    pub horizon_hours: f64,
    pub specs: Vec<ActionSpec>,
    pub channels: Vec<ActionChannel>,
    /// Per-hour weight rows; a single row when the world is frozen.
    hourly_weights: Vec<Vec<f64>>,
}

fn dirichlet_column(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    // Flat Dirichlet via normalized unit exponentials.
    let draws: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let sum: f64 = draws.iter().sum();
    draws.iter().map(|d| d / sum).collect()
}

/// Samples world parameters from a generator config. Deterministic in the
/// config seed.
pub fn gen_world(config: &GenConfig) -> Result<WorldParams> {
    config.validate()?;
    let mut rng = seeded_rng(mix_seed(config.seed, TAG_WORLD));
    let n_bins = config.n_bins as usize;

    let base: Vec<f64> = (0..n_bins)
        .map(|_| config.weight_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut specs = Vec::with_capacity(config.actions.len());
    let mut channels = Vec::with_capacity(config.actions.len());
    for (j, a) in config.actions.iter().enumerate() {
        let (cardinality, is_label) = match &a.channel {
            ChannelSpec::Label => (2, true),
            ChannelSpec::Flip { .. } => (2, false),
            ChannelSpec::Random { cardinality, .. } => (*cardinality, false),
            ChannelSpec::Table { probs } => (probs.len() as u32, false),
        };
        specs.push(ActionSpec {
            action_id: j as u32,
            reveal_delay_hours: a.reveal_delay_hours,
            cardinality,
            is_label_action: is_label,
        });
        let channel = match &a.channel {
            ChannelSpec::Label => ActionChannel {
                cardinality: 2,
                bucket_field: None,
                tables: vec![vec![[1.0, 0.0], [0.0, 1.0]]],
            },
            ChannelSpec::Flip { p } => ActionChannel {
                cardinality: 2,
                bucket_field: None,
                tables: vec![vec![[*p, 1.0 - p], [1.0 - p, *p]]],
            },
            ChannelSpec::Random { cardinality, bucket_field } => {
                let k = *cardinality as usize;
                let n_tables = if bucket_field.is_some() { n_bins } else { 1 };
                let tables = (0..n_tables)
                    .map(|_| {
                        let c0 = dirichlet_column(k, &mut rng);
                        let c1 = dirichlet_column(k, &mut rng);
                        (0..k).map(|v| [c0[v], c1[v]]).collect()
                    })
                    .collect();
                ActionChannel { cardinality: *cardinality, bucket_field: *bucket_field, tables }
            }
            ChannelSpec::Table { probs } => ActionChannel {
                cardinality: probs.len() as u32,
                bucket_field: None,
                tables: vec![probs.iter().map(|row| [row[0], row[1]]).collect()],
            },
        };
        channels.push(channel);
    }

    let hourly_weights = if config.drift_step == 0.0 {
        vec![base]
    } else {
        let mut drift_rng = seeded_rng(mix_seed(config.seed, TAG_DRIFT));
        let hours = config.horizon_hours.ceil() as usize + 1;
        let mut rows = Vec::with_capacity(hours);
        rows.push(base);
        for h in 1..hours {
            let prev = &rows[h - 1];
            let next: Vec<f64> = prev
                .iter()
                .map(|w| w + config.drift_step * drift_rng.sample::<f64, _>(StandardNormal))
                .collect();
            rows.push(next);
        }
        rows
    };

    Ok(WorldParams {
        seed: config.seed,
        n_bins: config.n_bins,
        n_fields: config.n_fields,
        drift_step: config.drift_step,
        delay_rate_per_hour: config.delay_rate_per_hour,
        horizon_hours: config.horizon_hours,
        specs,
        channels,
        hourly_weights,
    })
}

impl WorldParams {
    fn weights_at(&self, t: f64) -> &[f64] {
        if self.hourly_weights.len() == 1 {
            return &self.hourly_weights[0];
        }
        let hour = (t.floor().max(0.0) as usize).min(self.hourly_weights.len() - 1);
        &self.hourly_weights[hour]
    }

    pub fn label_action_id(&self) -> u32 {
        self.specs.iter().find(|s| s.is_label_action).map(|s| s.action_id).unwrap()
    }
}

/// Ground-truth conversion probability of a click at time `t`.
pub fn true_cvr(world: &WorldParams, x: &FeatureVector, t: f64) -> f64 {
    let w = world.weights_at(t);
    let logit: f64 = x.slots.iter().map(|&s| w[s as usize]).sum();
    1.0 / (1.0 + (-logit).exp())
}

/// Copies `y` with probability `keep_p`, flips it otherwise.
pub fn flip_action(y: bool, keep_p: f64, rng: &mut impl Rng) -> bool {
    if rng.random::<f64>() < keep_p {
        y
    } else {
        !y
    }
}

/// Samples a click stream from the world: uniform click times and feature
/// slots, Bernoulli conversions at the drifting ground-truth rate,
/// exponential delays, and channel-sampled action outcomes. Returns clicks
/// sorted by time with sequential sample ids.
pub fn gen_stream(world: &WorldParams, n_clicks: u64, horizon_hours: f64) -> Result<Vec<ClickEvent>> {
    if n_clicks == 0 {
        return Err(Error::config("n_clicks", "need at least 1 click"));
    }
    if !(horizon_hours > 0.0) || horizon_hours > world.horizon_hours {
        return Err(Error::config(
            "horizon_hours",
            format!("must lie in (0, {}] for this world", world.horizon_hours),
        ));
    }
    let mut rng = seeded_rng(mix_seed(world.seed, TAG_STREAM));
    let mut clicks = Vec::with_capacity(n_clicks as usize);
    for _ in 0..n_clicks {
        let t = rng.random::<f64>() * horizon_hours;
        let slots: Vec<u32> = (0..world.n_fields).map(|_| rng.random_range(0..world.n_bins)).collect();
        let x = FeatureVector::new(slots);
        let p = true_cvr(world, &x, t);
        let converts = rng.random::<f64>() < p;
        let delay = if converts {
            Some(-(1.0 - rng.random::<f64>()).ln() / world.delay_rate_per_hour)
        } else {
            None
        };
        let actions: Vec<u32> = world
            .specs
            .iter()
            .zip(&world.channels)
            .map(|(spec, channel)| {
                if spec.is_label_action {
                    u32::from(converts)
                } else {
                    let bucket = channel.bucket_field.map(|f| x.slots[f as usize]).unwrap_or(0);
                    channel.sample(bucket, converts, &mut rng)
                }
            })
            .collect();
        clicks.push(ClickEvent {
            sample_id: 0,
            click_time_hours: t,
            features: x,
            converts,
            conversion_delay_hours: delay,
            actions,
        });
    }
    crate::core::sort_clicks(&mut clicks);
    for (i, c) in clicks.iter_mut().enumerate() {
        c.sample_id = i as u64;
    }
    Ok(clicks)
}

/// Field-salted 64-bit feature hash reduced to `n_bins` (a power of two):
/// FNV-1a over the salted bytes, then a splitmix finalizer for well-mixed
/// low bits.
pub fn hash_feature(field_index: u32, raw: &[u8], n_bins: u32) -> u32 {
    assert!(n_bins.is_power_of_two(), "n_bins must be a power of two");
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for b in field_index.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    for &b in raw {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    (mix_seed(h, 0) & (n_bins as u64 - 1)) as u32
}

/// Name of the pinned hash function, recorded in run metadata.
pub const HASH_FUNCTION: &str = "fnv1a64-splitmix-v1";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    /// Hashed slot table size; must be a power of two.
    pub hash_bins: u32,
    /// Quantile bucket count for numeric features.
    pub numeric_bins: u32,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { hash_bins: 1 << 16, numeric_bins: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows_read: u64,
    pub events: u64,
    pub skipped_malformed: u64,
    /// Up to 20 (line, reason) examples of skipped rows.
    pub skipped_examples: Vec<(u64, String)>,
    pub rejected_time_order: u64,
    pub min_click_ts: i64,
    pub n_fields: u32,
}

const CRITEO_NUMERIC: usize = 8;
const CRITEO_CATEGORICAL: usize = 9;
const CRITEO_COLS: usize = 2 + CRITEO_NUMERIC + CRITEO_CATEGORICAL;

struct RawRow {
    click_ts: i64,
    conv_ts: Option<i64>,
    numeric: [Option<f64>; CRITEO_NUMERIC],
    categorical: [Option<String>; CRITEO_CATEGORICAL],
}

/// Ingests a tab-separated conversion log (click timestamp, optional
/// conversion timestamp, 8 numeric and 9 categorical features per row).
///
/// Numeric features are quantile-bucketed (edges estimated from the file
/// itself), then every feature is hashed into `hash_bins` slots with a
/// presence prefix so missing values get their own slot. Click times are
/// rebased to hours from the earliest click. Malformed rows are skipped
/// and counted; conversions before their click are rejected. Ingested
/// clicks carry no actions; see [`attach_conversion_actions`].
pub fn ingest_criteo(path: &Path, opts: &IngestOptions) -> Result<(Vec<ClickEvent>, IngestSummary)> {
    if !opts.hash_bins.is_power_of_two() {
        return Err(Error::config("hash_bins", "must be a power of two"));
    }
    if opts.numeric_bins < 2 {
        return Err(Error::config("numeric_bins", "need at least 2 buckets"));
    }
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);

    let mut rows: Vec<RawRow> = Vec::new();
    let mut summary = IngestSummary {
        rows_read: 0,
        events: 0,
        skipped_malformed: 0,
        skipped_examples: Vec::new(),
        rejected_time_order: 0,
        min_click_ts: 0,
        n_fields: (CRITEO_NUMERIC + CRITEO_CATEGORICAL) as u32,
    };
    let skip = |summary: &mut IngestSummary, line: u64, reason: String| {
        summary.skipped_malformed += 1;
        if summary.skipped_examples.len() < 20 {
            summary.skipped_examples.push((line, reason));
        }
    };

    for (i, line) in reader.lines().enumerate() {
        let line_no = (i + 1) as u64;
        let line = line?;
        summary.rows_read += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != CRITEO_COLS {
            skip(&mut summary, line_no, format!("expected {CRITEO_COLS} columns, got {}", cols.len()));
            continue;
        }
        let click_ts: i64 = match cols[0].trim().parse() {
            Ok(v) => v,
            Err(_) => {
                skip(&mut summary, line_no, format!("bad click timestamp `{}`", cols[0]));
                continue;
            }
        };
        let conv_ts: Option<i64> = if cols[1].trim().is_empty() {
            None
        } else {
            match cols[1].trim().parse() {
                Ok(v) => Some(v),
                Err(_) => {
                    skip(&mut summary, line_no, format!("bad conversion timestamp `{}`", cols[1]));
                    continue;
                }
            }
        };
        if let Some(conv) = conv_ts {
            if conv < click_ts {
                summary.rejected_time_order += 1;
                continue;
            }
        }
        let mut numeric = [None; CRITEO_NUMERIC];
        let mut bad = None;
        for f in 0..CRITEO_NUMERIC {
            let raw = cols[2 + f].trim();
            if raw.is_empty() {
                continue;
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => numeric[f] = Some(v),
                _ => {
                    bad = Some(format!("bad numeric feature {f} `{raw}`"));
                    break;
                }
            }
        }
        if let Some(reason) = bad {
            skip(&mut summary, line_no, reason);
            continue;
        }
        let mut categorical: [Option<String>; CRITEO_CATEGORICAL] = Default::default();
        for f in 0..CRITEO_CATEGORICAL {
            let raw = cols[2 + CRITEO_NUMERIC + f].trim();
            if !raw.is_empty() {
                categorical[f] = Some(raw.to_string());
            }
        }
        rows.push(RawRow { click_ts, conv_ts, numeric, categorical });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("no usable rows in {}", path.display())));
    }

    // Quantile edges per numeric feature from the observed values.
    let mut edges: Vec<Vec<f64>> = Vec::with_capacity(CRITEO_NUMERIC);
    for f in 0..CRITEO_NUMERIC {
        let mut vals: Vec<f64> = rows.iter().filter_map(|r| r.numeric[f]).collect();
        vals.sort_by(f64::total_cmp);
        let mut e = Vec::new();
        if !vals.is_empty() {
            for q in 1..opts.numeric_bins {
                let idx = (q as usize * vals.len()) / opts.numeric_bins as usize;
                e.push(vals[idx.min(vals.len() - 1)]);
            }
            e.dedup();
        }
        edges.push(e);
    }

    let min_click_ts = rows.iter().map(|r| r.click_ts).min().unwrap();
    summary.min_click_ts = min_click_ts;

    let mut clicks: Vec<ClickEvent> = rows
        .iter()
        .map(|r| {
            let mut slots = Vec::with_capacity(CRITEO_NUMERIC + CRITEO_CATEGORICAL);
            let mut data = Vec::with_capacity(64);
            for f in 0..CRITEO_NUMERIC {
                data.clear();
                match r.numeric[f] {
                    Some(v) => {
                        let bucket = edges[f].partition_point(|&e| e <= v) as u32;
                        data.push(1);
                        data.extend_from_slice(&bucket.to_le_bytes());
                    }
                    None => data.push(0),
                }
                slots.push(hash_feature(f as u32, &data, opts.hash_bins));
            }
            for f in 0..CRITEO_CATEGORICAL {
                data.clear();
                match &r.categorical[f] {
                    Some(s) => {
                        data.push(1);
                        data.extend_from_slice(s.as_bytes());
                    }
                    None => data.push(0),
                }
                slots.push(hash_feature((CRITEO_NUMERIC + f) as u32, &data, opts.hash_bins));
            }
            let converts = r.conv_ts.is_some();
            ClickEvent {
                sample_id: 0,
                click_time_hours: (r.click_ts - min_click_ts) as f64 / 3600.0,
                features: FeatureVector::new(slots),
                converts,
                conversion_delay_hours: r.conv_ts.map(|c| (c - r.click_ts) as f64 / 3600.0),
                actions: Vec::new(),
            }
        })
        .collect();
    crate::core::sort_clicks(&mut clicks);
    for (i, c) in clicks.iter_mut().enumerate() {
        c.sample_id = i as u64;
    }
    summary.events = clicks.len() as u64;
    Ok((clicks, summary))
}

/// Fills in action outcomes derived from the conversion timeline: the
/// label action copies `converts`, every other action is the indicator of
/// a conversion within its reveal delay. Requires binary actions.
pub fn attach_conversion_actions(clicks: &mut [ClickEvent], specs: &[ActionSpec]) -> Result<()> {
    crate::core::validate_specs(specs)?;
    for s in specs {
        if s.cardinality != 2 {
            return Err(Error::config(
                format!("actions[{}]", s.action_id),
                "conversion-derived actions must be binary",
            ));
        }
    }
    for c in clicks.iter_mut() {
        c.actions = specs
            .iter()
            .map(|s| {
                if s.is_label_action {
                    u32::from(c.converts)
                } else {
                    match c.conversion_delay_hours {
                        Some(d) => u32::from(d <= s.reveal_delay_hours),
                        None => 0,
                    }
                }
            })
            .collect();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> GenConfig {
        GenConfig {
            seed: 11,
            n_bins: 32,
            n_fields: 3,
            weight_scale: 0.5,
            drift_step: 0.01,
            delay_rate_per_hour: 1.0 / 6.0,
            horizon_hours: 48.0,
            n_clicks: 4000,
            actions: vec![
                ActionGenSpec { reveal_delay_hours: 0.5, channel: ChannelSpec::Flip { p: 0.9 } },
                ActionGenSpec {
                    reveal_delay_hours: 2.0,
                    channel: ChannelSpec::Random { cardinality: 3, bucket_field: None },
                },
                ActionGenSpec { reveal_delay_hours: 24.0, channel: ChannelSpec::Label },
            ],
        }
    }

    #[test]
    fn world_generation_is_deterministic() {
        let w1 = gen_world(&config()).unwrap();
        let w2 = gen_world(&config()).unwrap();
        assert_eq!(w1, w2);
        let mut other = config();
        other.seed = 12;
        assert_ne!(gen_world(&other).unwrap(), w1);
    }

    #[test]
    fn world_serializes_round_trip() {
        let w = gen_world(&config()).unwrap();
        let json = serde_json::to_string(&w).unwrap();
        let back: WorldParams = serde_json::from_str(&json).unwrap();
        assert_eq!(w, back);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn channel_tables_are_column_stochastic() {
        let w = gen_world(&config()).unwrap();
        for channel in &w.channels {
            for table in &channel.tables {
                for y in 0..2 {
                    let col: f64 = table.iter().map(|row| row[y]).sum();
                    assert!((col - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn true_cvr_is_a_probability_and_frozen_without_drift() {
        let mut cfg = config();
        cfg.drift_step = 0.0;
        let w = gen_world(&cfg).unwrap();
        let x = FeatureVector::new(vec![0, 5, 31]);
        let p0 = true_cvr(&w, &x, 0.0);
        let p1 = true_cvr(&w, &x, 40.0);
        assert!(p0 > 0.0 && p0 < 1.0);
        assert_eq!(p0, p1);
    }

    #[test]
    fn drifting_world_changes_over_hours() {
        let w = gen_world(&config()).unwrap();
        let x = FeatureVector::new(vec![0, 5, 31]);
        assert_ne!(true_cvr(&w, &x, 0.0), true_cvr(&w, &x, 47.0));
    }

    #[test]
    fn stream_is_sorted_consistent_and_deterministic() {
        let w = gen_world(&config()).unwrap();
        let s1 = gen_stream(&w, 4000, 48.0).unwrap();
        let s2 = gen_stream(&w, 4000, 48.0).unwrap();
        assert_eq!(s1, s2);
        let label = w.label_action_id() as usize;
        for (i, c) in s1.iter().enumerate() {
            assert_eq!(c.sample_id, i as u64);
            assert!(c.click_time_hours >= 0.0 && c.click_time_hours < 48.0);
            assert_eq!(c.converts, c.conversion_delay_hours.is_some());
            assert_eq!(c.actions[label], u32::from(c.converts));
            assert_eq!(c.actions.len(), 3);
            if i > 0 {
                assert!(s1[i - 1].click_time_hours <= c.click_time_hours);
            }
        }
    }

    #[test]
    fn flip_channel_matches_its_rate() {
        let w = gen_world(&config()).unwrap();
        let s = gen_stream(&w, 4000, 48.0).unwrap();
        let agree = s.iter().filter(|c| (c.actions[0] == 1) == c.converts).count() as f64;
        let rate = agree / s.len() as f64;
        // 3 sigma around 0.9 at n = 4000 is about 0.0142.
        assert!((rate - 0.9).abs() < 0.015, "flip agreement {rate}");
    }

    #[test]
    fn conversion_rate_tracks_ground_truth() {
        let w = gen_world(&config()).unwrap();
        let s = gen_stream(&w, 4000, 48.0).unwrap();
        let expected: f64 =
            s.iter().map(|c| true_cvr(&w, &c.features, c.click_time_hours)).sum::<f64>() / s.len() as f64;
        let actual = s.iter().filter(|c| c.converts).count() as f64 / s.len() as f64;
        assert!((actual - expected).abs() < 0.025, "cvr {actual} vs {expected}");
    }

    #[test]
    fn delays_are_exponential_with_the_configured_rate() {
        let w = gen_world(&config()).unwrap();
        let s = gen_stream(&w, 4000, 48.0).unwrap();
        let delays: Vec<f64> = s.iter().filter_map(|c| c.conversion_delay_hours).collect();
        let mean = delays.iter().sum::<f64>() / delays.len() as f64;
        let expect = 6.0;
        let tol = 3.0 * expect / (delays.len() as f64).sqrt();
        assert!((mean - expect).abs() < tol, "delay mean {mean}, n {}", delays.len());
    }

    #[test]
    fn flip_action_statistics() {
        let mut rng = seeded_rng(9);
        let n = 20_000;
        let kept = (0..n).filter(|_| flip_action(true, 0.8, &mut rng)).count() as f64;
        assert!((kept / n as f64 - 0.8).abs() < 0.01);
    }

    #[test]
    fn bucketed_random_channel_varies_by_field_bin() {
        let mut cfg = config();
        cfg.actions[1].channel = ChannelSpec::Random { cardinality: 3, bucket_field: Some(0) };
        let w = gen_world(&cfg).unwrap();
        assert_eq!(w.channels[1].tables.len(), 32);
        assert_ne!(w.channels[1].table(0), w.channels[1].table(1));
    }

    #[test]
    fn hash_fills_every_bin_and_salts_by_field() {
        let mut seen = vec![false; 16];
        for v in 0u32..100_000 {
            seen[hash_feature(0, &v.to_le_bytes(), 16) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
        let h0 = hash_feature(0, b"abc", 1 << 20);
        let h1 = hash_feature(1, b"abc", 1 << 20);
        assert_ne!(h0, h1);
        assert_eq!(h0, hash_feature(0, b"abc", 1 << 20));
    }

    #[test]
    fn ingest_parses_skips_and_rebases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.tsv");
        let mut lines = Vec::new();
        // 19 columns: ts, conv, 8 numeric, 9 categorical.
        let row = |ts: i64, conv: &str, n0: &str, c0: &str| {
            let mut cols = vec![ts.to_string(), conv.to_string()];
            cols.push(n0.to_string());
            cols.extend(std::iter::repeat_n(String::new(), 7));
            cols.push(c0.to_string());
            cols.extend(std::iter::repeat_n(String::new(), 8));
            cols.join("\t")
        };
        lines.push(row(7200, "10800", "5", "ad1"));
        lines.push(row(3600, "", "2", "ad2"));
        lines.push(row(9000, "3600", "1", "ad1"));
        lines.push("not\ta\trow".to_string());
        lines.push(row(10800, "", "oops", "ad3"));
        std::fs::write(&path, lines.join("\n")).unwrap();

        let opts = IngestOptions { hash_bins: 64, numeric_bins: 4 };
        let (clicks, summary) = ingest_criteo(&path, &opts).unwrap();
        assert_eq!(summary.rows_read, 5);
        assert_eq!(summary.skipped_malformed, 2);
        assert_eq!(summary.rejected_time_order, 1);
        assert_eq!(clicks.len(), 2);
        assert_eq!(summary.min_click_ts, 3600);
        assert_eq!(clicks[0].click_time_hours, 0.0);
        assert_eq!(clicks[1].click_time_hours, 1.0);
        assert!(clicks[1].converts);
        assert_eq!(clicks[1].conversion_delay_hours, Some(1.0));
        assert!(!clicks[0].converts);
        for c in &clicks {
            assert_eq!(c.features.n_fields(), 17);
            assert!(c.features.slots.iter().all(|&s| s < 64));
            assert!(c.actions.is_empty());
        }
    }

    #[test]
    fn attach_actions_follows_delay_windows() {
        let specs = vec![
            ActionSpec { action_id: 0, reveal_delay_hours: 2.0, cardinality: 2, is_label_action: false },
            ActionSpec { action_id: 1, reveal_delay_hours: 24.0, cardinality: 2, is_label_action: true },
        ];
        let mut clicks = vec![
            ClickEvent {
                sample_id: 0,
                click_time_hours: 0.0,
                features: FeatureVector::new(vec![0]),
                converts: true,
                conversion_delay_hours: Some(1.5),
                actions: Vec::new(),
            },
            ClickEvent {
                sample_id: 1,
                click_time_hours: 0.0,
                features: FeatureVector::new(vec![1]),
                converts: true,
                conversion_delay_hours: Some(7.0),
                actions: Vec::new(),
            },
            ClickEvent {
                sample_id: 2,
                click_time_hours: 0.0,
                features: FeatureVector::new(vec![2]),
                converts: false,
                conversion_delay_hours: None,
                actions: Vec::new(),
            },
        ];
        attach_conversion_actions(&mut clicks, &specs).unwrap();
        assert_eq!(clicks[0].actions, vec![1, 1]);
        assert_eq!(clicks[1].actions, vec![0, 1]);
        assert_eq!(clicks[2].actions, vec![0, 0]);
    }
}
