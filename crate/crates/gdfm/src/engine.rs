//! Streaming train/evaluate protocol: pretrain on an initial window with
//! matured labels, then walk forward hour by hour, scoring each hour's
//! clicks before training on the feedback that arrives during it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::core::{derive_timeline, validate_specs, ActionSpec, ClickEvent, ObservationKind};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::{relative_improvement, MetricsReport};
use crate::model::{
    read_checkpoint, write_checkpoint, ActionGrad, ActionModel, ActionOptimizer, CvrGrad,
    CvrModel, CvrOptimizer, ModelDims, OptimizerKind, SectionMap,
};
use crate::par::{map_indexed, mix_seed, seeded_rng, Parallelism};
use crate::weights::{combine_and_normalize, conditional_entropy, estimate_joint, WeightVector};

const TAG_THETA: u64 = 0x01;
const TAG_PHI: u64 = 0x02;
const TAG_AUX_DP: u64 = 0x03;
const TAG_AUX_IN: u64 = 0x04;
const TAG_PRETRAIN_SHUFFLE: u64 = 0x10;
const TAG_PHI_SHUFFLE: u64 = 0x11;
const TAG_AUX_SHUFFLE: u64 = 0x12;
const TAG_STREAM_SHUFFLE: u64 = 0x20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Freeze the pretrained model; stream evaluation only.
    Pretrain,
    /// Train on labels as they mature, each one label-delay late.
    Vanilla,
    /// Train on the true label at click time. Upper anchor.
    Oracle,
    /// Ingest every click as an immediate negative, re-ingest converters as
    /// positives, correct with importance weights.
    Fnw,
    /// Wait a short window before ingesting, re-ingest late converters,
    /// correct with elapsed-time importance weights.
    Esdfm,
    /// Train on every delayed action through its proxy loss, entropy- and
    /// delay-weighted, with a lag-model regularizer.
    Gdfm,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Pretrain, Method::Vanilla, Method::Oracle, Method::Fnw, Method::Esdfm, Method::Gdfm];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Pretrain => "pretrain",
            Method::Vanilla => "vanilla",
            Method::Oracle => "oracle",
            Method::Fnw => "fnw",
            Method::Esdfm => "esdfm",
            Method::Gdfm => "gdfm",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn d_embed() -> u32 { 8 }
fn d_hidden() -> u32 { 32 }
fn d_alpha() -> f64 { 2.0 }
fn d_beta() -> f64 { 1.0 }
fn d_lambda() -> f64 { 0.01 }
fn d_lr() -> f64 { 1e-3 }
fn d_batch() -> usize { 512 }
fn d_fraction() -> f64 { 0.5 }
fn d_epochs() -> u32 { 3 }
fn d_window() -> f64 { 24.0 }
fn d_min_labeled() -> usize { 100 }

/// One streaming run: method, seed, model size, and protocol knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub n_bins: u32,
    #[serde(default = "d_embed")]
    pub embed_dim: u32,
    #[serde(default = "d_hidden")]
    pub hidden_dim: u32,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "OptimizerKind::adam_default")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_fraction")]
    pub pretrain_fraction: f64,
    #[serde(default = "d_epochs")]
    pub pretrain_epochs: u32,
    #[serde(default = "d_window")]
    pub esdfm_window_hours: f64,
    #[serde(default = "d_min_labeled")]
    pub min_labeled: usize,
    #[serde(default)]
    pub reestimate_weights_every_hours: Option<u32>,
}

impl RunConfig {
    pub fn new(method: Method, seed: u64, n_bins: u32) -> Self {
        RunConfig {
            method,
            seed,
            n_bins,
            embed_dim: d_embed(),
            hidden_dim: d_hidden(),
            alpha: d_alpha(),
            beta: d_beta(),
            lambda: d_lambda(),
            lr: d_lr(),
            optimizer: OptimizerKind::adam_default(),
            batch_size: d_batch(),
            pretrain_fraction: d_fraction(),
            pretrain_epochs: d_epochs(),
            esdfm_window_hours: d_window(),
            min_labeled: d_min_labeled(),
            reestimate_weights_every_hours: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("model", "n_bins, embed_dim, hidden_dim must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "learning rate must be positive and finite"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.pretrain_fraction > 0.0 && self.pretrain_fraction < 1.0) {
            return Err(Error::config("pretrain_fraction", "must lie strictly between 0 and 1"));
        }
        if self.pretrain_epochs == 0 {
            return Err(Error::config("pretrain_epochs", "must be >= 1"));
        }
        if !self.esdfm_window_hours.is_finite() || self.esdfm_window_hours < 0.0 {
            return Err(Error::config("esdfm_window_hours", "must be finite and >= 0"));
        }
        if self.reestimate_weights_every_hours == Some(0) {
            return Err(Error::config("reestimate_weights_every_hours", "must be >= 1 when set"));
        }
        Ok(())
    }

    fn dims(&self, n_fields: u32) -> ModelDims {
        ModelDims {
            n_bins: self.n_bins,
            n_fields,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

/// Models produced by pretraining and updated by the stream. Which slots
/// are populated depends on the method.
#[derive(Debug)]
pub struct TrainedState {
    pub dims: ModelDims,
    pub theta: CvrModel<f32>,
    pub delayed: Option<CvrModel<f32>>,
    pub phi: Option<ActionModel<f32>>,
    pub aux_dp: Option<CvrModel<f32>>,
    pub aux_in: Option<CvrModel<f32>>,
    pub weights: Option<WeightVector>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainEventKind {
    Action { action_id: u32, outcome: u32 },
    Label { converted: bool },
    Plain { y: bool },
    Fnw { y_obs: bool },
    Esdfm { y_obs: bool },
}

impl TrainEventKind {
    fn order_rank(&self) -> u8 {
        match self {
            TrainEventKind::Action { .. } => 0,
            TrainEventKind::Label { .. } => 1,
            TrainEventKind::Plain { .. } => 2,
            TrainEventKind::Fnw { .. } => 3,
            TrainEventKind::Esdfm { .. } => 4,
        }
    }
}

/// One training ingestion: the click it refers to and what is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainEvent {
    pub time: f64,
    pub click_idx: usize,
    pub kind: TrainEventKind,
}

/// Expands post-split clicks into the training events the method would see
/// in a live stream, dropping anything that reveals past the horizon.
/// Returned sorted by reveal time.
pub fn schedule_events(
    clicks: &[ClickEvent],
    specs: &[ActionSpec],
    method: Method,
    esdfm_window_hours: f64,
    split_hours: f64,
    horizon_hours: f64,
) -> Result<Vec<TrainEvent>> {
    let label_id = validate_specs(specs)?;
    let delta_y = specs
        .iter()
        .find(|s| s.action_id == label_id)
        .map(|s| s.reveal_delay_hours)
        .expect("validated specs include the label");
    let mut events = Vec::new();
    for (idx, c) in clicks.iter().enumerate() {
        let t = c.click_time_hours;
        if t < split_hours || t >= horizon_hours {
            continue;
        }
        match method {
            Method::Pretrain => {}
            Method::Oracle => {
                events.push(TrainEvent { time: t, click_idx: idx, kind: TrainEventKind::Plain { y: c.converts } });
            }
            Method::Vanilla => {
                events.push(TrainEvent {
                    time: t + delta_y,
                    click_idx: idx,
                    kind: TrainEventKind::Plain { y: c.converts },
                });
            }
            Method::Fnw => {
                events.push(TrainEvent { time: t, click_idx: idx, kind: TrainEventKind::Fnw { y_obs: false } });
                if let Some(ct) = c.conversion_time() {
                    events.push(TrainEvent { time: ct, click_idx: idx, kind: TrainEventKind::Fnw { y_obs: true } });
                }
            }
            Method::Esdfm => {
                let w = esdfm_window_hours;
                let in_window = c.conversion_delay_hours.is_some_and(|d| d <= w);
                events.push(TrainEvent {
                    time: t + w,
                    click_idx: idx,
                    kind: TrainEventKind::Esdfm { y_obs: in_window },
                });
                if let Some(d) = c.conversion_delay_hours {
                    if d > w {
                        events.push(TrainEvent {
                            time: t + d,
                            click_idx: idx,
                            kind: TrainEventKind::Esdfm { y_obs: true },
                        });
                    }
                }
            }
            Method::Gdfm => {
                for obs in derive_timeline(idx, c, specs)? {
                    let kind = match obs.kind {
                        ObservationKind::ActionObserved { action_id, outcome } => {
                            TrainEventKind::Action { action_id, outcome }
                        }
                        ObservationKind::LabelRevealed { converted } => TrainEventKind::Label { converted },
                    };
                    events.push(TrainEvent { time: obs.reveal_time_hours, click_idx: idx, kind });
                }
            }
        }
    }
    events.retain(|e| e.time < horizon_hours);
    events.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.click_idx.cmp(&b.click_idx))
            .then(a.kind.order_rank().cmp(&b.kind.order_rank()))
    });
    Ok(events)
}

/// Streaming run report: what was trained, how evaluation moved by hour,
/// and the averaged metrics over the streaming window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub split_hour: u32,
    pub horizon_hour: u32,
    pub n_pretrain_clicks: u64,
    pub n_eval_clicks: u64,
    pub n_train_events: u64,
    pub weight_reestimates: u32,
    /// Final per-action weights in spec order, when the method uses them.
    pub weights: Option<Vec<f64>>,
    /// Saturated-logit events across all models in the run.
    pub clamp_events: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub state: TrainedState,
}

fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        items.swap(i, rng.random_range(0..=i));
    }
}

fn std_mean(vals: &[f64]) -> (Option<f64>, Option<f64>) {
    if vals.is_empty() {
        return (None, None);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (Some(mean), None);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

fn train_cvr_epochs(
    model: &mut CvrModel<f32>,
    opt: &mut CvrOptimizer<f32>,
    data: &[(usize, bool)],
    clicks: &[ClickEvent],
    epochs: u32,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let mut grad = CvrGrad::zeroed_like(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        let mut rng = seeded_rng(mix_seed(seed, epoch as u64));
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(batch_size) {
            grad.reset();
            for &i in chunk {
                let (click_idx, y) = data[i];
                losses::loss_delayed_label(model, &clicks[click_idx].features, y, &mut grad)?;
            }
            opt.apply_update(model, &grad, 1.0 / chunk.len() as f64)?;
        }
    }
    Ok(())
}

fn estimate_weights(
    clicks: &[ClickEvent],
    specs: &[ActionSpec],
    delta_y: f64,
    alpha: f64,
    beta: f64,
) -> Result<WeightVector> {
    let mut entropies = Vec::with_capacity(specs.len());
    let mut delays = Vec::with_capacity(specs.len());
    for (j, spec) in specs.iter().enumerate() {
        let counts = estimate_joint(clicks, j, spec.cardinality)?;
        entropies.push(conditional_entropy(&counts.smoothed()));
        delays.push(spec.reveal_delay_hours);
    }
    combine_and_normalize(&entropies, &delays, delta_y, alpha, beta)
}

struct Prepared {
    dims: ModelDims,
    label_id: u32,
    delta_y: f64,
    split_hour: u32,
    horizon_hour: u32,
    pretrain_idx: Vec<usize>,
    stream_idx: Vec<usize>,
}

fn prepare(clicks: &[ClickEvent], specs: &[ActionSpec], cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let label_id = validate_specs(specs)?;
    let delta_y = specs
        .iter()
        .find(|s| s.action_id == label_id)
        .map(|s| s.reveal_delay_hours)
        .expect("validated specs include the label");
    if clicks.is_empty() {
        return Err(Error::EmptyInput("no clicks in the stream".into()));
    }
    let n_fields = clicks[0].features.slots.len();
    let mut max_t = 0.0f64;
    for c in clicks {
        if c.features.slots.len() != n_fields {
            return Err(Error::ShapeMismatch(format!(
                "click {} has {} feature slots, expected {n_fields}",
                c.sample_id,
                c.features.slots.len()
            )));
        }
        if let Some(&s) = c.features.slots.iter().find(|&&s| s >= cfg.n_bins) {
            return Err(Error::ShapeMismatch(format!(
                "click {} slot {s} exceeds n_bins {}",
                c.sample_id, cfg.n_bins
            )));
        }
        if c.actions.len() != specs.len() {
            return Err(Error::ShapeMismatch(format!(
                "click {} has {} actions, expected {}",
                c.sample_id,
                c.actions.len(),
                specs.len()
            )));
        }
        max_t = max_t.max(c.click_time_hours);
    }
    let horizon_hour = (max_t.floor() as u32) + 1;
    let split_hour = ((horizon_hour as f64) * cfg.pretrain_fraction).floor() as u32;
    if split_hour == 0 || split_hour >= horizon_hour {
        return Err(Error::config(
            "pretrain_fraction",
            format!("split hour {split_hour} leaves no streaming window before hour {horizon_hour}"),
        ));
    }
    let split = split_hour as f64;
    let mut pretrain_idx = Vec::new();
    let mut stream_idx = Vec::new();
    for (i, c) in clicks.iter().enumerate() {
        if c.click_time_hours < split {
            pretrain_idx.push(i);
        } else {
            stream_idx.push(i);
        }
    }
    if pretrain_idx.len() < cfg.min_labeled {
        return Err(Error::InsufficientData(format!(
            "{} pretrain clicks, need at least {}",
            pretrain_idx.len(),
            cfg.min_labeled
        )));
    }
    if stream_idx.is_empty() {
        return Err(Error::InsufficientData("no clicks after the pretrain split".into()));
    }
    let dims = cfg.dims(n_fields as u32);
    dims.validate()?;
    Ok(Prepared { dims, label_id, delta_y, split_hour, horizon_hour, pretrain_idx, stream_idx })
}

struct Optimizers {
    theta: CvrOptimizer<f32>,
    delayed: Option<CvrOptimizer<f32>>,
    phi: Option<ActionOptimizer<f32>>,
}

/// Offline pretraining on the initial window, where every label has
/// matured: the conversion model always, plus the method's side models.
fn pretrain(
    clicks: &[ClickEvent],
    specs: &[ActionSpec],
    cfg: &RunConfig,
    prep: &Prepared,
) -> Result<(TrainedState, Optimizers)> {
    let mut rng = seeded_rng(mix_seed(cfg.seed, TAG_THETA));
    let mut theta = CvrModel::<f32>::init(prep.dims, &mut rng)?;
    let mut theta_opt = CvrOptimizer::new(cfg.optimizer, cfg.lr, &theta);
    let labeled: Vec<(usize, bool)> =
        prep.pretrain_idx.iter().map(|&i| (i, clicks[i].converts)).collect();
    train_cvr_epochs(
        &mut theta,
        &mut theta_opt,
        &labeled,
        clicks,
        cfg.pretrain_epochs,
        cfg.batch_size,
        mix_seed(cfg.seed, TAG_PRETRAIN_SHUFFLE),
    )?;

    let mut state = TrainedState {
        dims: prep.dims,
        theta,
        delayed: None,
        phi: None,
        aux_dp: None,
        aux_in: None,
        weights: None,
    };
    let mut opts = Optimizers { theta: theta_opt, delayed: None, phi: None };

    match cfg.method {
        Method::Gdfm => {
            let mut rng = seeded_rng(mix_seed(cfg.seed, TAG_PHI));
            let mut phi = ActionModel::<f32>::init(prep.dims, specs, &mut rng)?;
            let mut phi_opt = ActionOptimizer::new(cfg.optimizer, cfg.lr, &phi);
            let mut grad = ActionGrad::zeroed_like(&phi);
            let mut order = prep.pretrain_idx.clone();
            for epoch in 0..cfg.pretrain_epochs {
                let mut rng =
                    seeded_rng(mix_seed(mix_seed(cfg.seed, TAG_PHI_SHUFFLE), epoch as u64));
                shuffle(&mut order, &mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    grad.reset();
                    let mut n_terms = 0u64;
                    for &i in chunk {
                        let c = &clicks[i];
                        for (j, spec) in specs.iter().enumerate() {
                            if spec.action_id == prep.label_id {
                                continue;
                            }
                            losses::loss_action(
                                &phi,
                                &c.features,
                                c.converts,
                                c.actions[j],
                                spec.action_id,
                                &mut grad,
                            )?;
                            n_terms += 1;
                        }
                    }
                    if n_terms > 0 {
                        phi_opt.apply_update(&mut phi, &grad, 1.0 / n_terms as f64)?;
                    }
                }
            }
            let pre_clicks: Vec<ClickEvent> =
                prep.pretrain_idx.iter().map(|&i| clicks[i].clone()).collect();
            state.weights =
                Some(estimate_weights(&pre_clicks, specs, prep.delta_y, cfg.alpha, cfg.beta)?);
            let delayed = state.theta.clone();
            opts.delayed = Some(CvrOptimizer::new(cfg.optimizer, cfg.lr, &delayed));
            state.delayed = Some(delayed);
            opts.phi = Some(phi_opt);
            state.phi = Some(phi);
        }
        Method::Esdfm => {
            let w = cfg.esdfm_window_hours;
            let in_window: Vec<(usize, bool)> = prep
                .pretrain_idx
                .iter()
                .map(|&i| (i, clicks[i].conversion_delay_hours.is_some_and(|d| d <= w)))
                .collect();
            let mut rng = seeded_rng(mix_seed(cfg.seed, TAG_AUX_IN));
            let mut aux_in = CvrModel::<f32>::init(prep.dims, &mut rng)?;
            let mut aux_in_opt = CvrOptimizer::new(cfg.optimizer, cfg.lr, &aux_in);
            train_cvr_epochs(
                &mut aux_in,
                &mut aux_in_opt,
                &in_window,
                clicks,
                cfg.pretrain_epochs,
                cfg.batch_size,
                mix_seed(cfg.seed, TAG_AUX_SHUFFLE),
            )?;

            let observed_neg: Vec<(usize, bool)> = in_window
                .iter()
                .filter(|&&(_, inw)| !inw)
                .map(|&(i, _)| (i, clicks[i].converts))
                .collect();
            if observed_neg.is_empty() {
                return Err(Error::InsufficientData(
                    "every pretrain click converted inside the window; cannot fit the delayed-positive model"
                        .into(),
                ));
            }
            let mut rng = seeded_rng(mix_seed(cfg.seed, TAG_AUX_DP));
            let mut aux_dp = CvrModel::<f32>::init(prep.dims, &mut rng)?;
            let mut aux_dp_opt = CvrOptimizer::new(cfg.optimizer, cfg.lr, &aux_dp);
            train_cvr_epochs(
                &mut aux_dp,
                &mut aux_dp_opt,
                &observed_neg,
                clicks,
                cfg.pretrain_epochs,
                cfg.batch_size,
                mix_seed(cfg.seed, TAG_AUX_SHUFFLE ^ 1),
            )?;
            state.aux_in = Some(aux_in);
            state.aux_dp = Some(aux_dp);
        }
        _ => {}
    }
    Ok((state, opts))
}

pub struct PretrainOutput {
    pub state: TrainedState,
    pub split_hour: u32,
    pub horizon_hour: u32,
    pub n_pretrain_clicks: u64,
}

/// Pretraining alone, for producing an inspectable checkpoint of the
/// initial models.
pub fn run_pretrain_only(
    clicks: &[ClickEvent],
    specs: &[ActionSpec],
    cfg: &RunConfig,
) -> Result<PretrainOutput> {
    let prep = prepare(clicks, specs, cfg)?;
    let (state, _) = pretrain(clicks, specs, cfg, &prep)?;
    Ok(PretrainOutput {
        state,
        split_hour: prep.split_hour,
        horizon_hour: prep.horizon_hour,
        n_pretrain_clicks: prep.pretrain_idx.len() as u64,
    })
}

/// Runs a full method: pretrain, then stream hour by hour, evaluating each
/// hour's clicks before training on the hour's revealed feedback.
pub fn run_method(clicks: &[ClickEvent], specs: &[ActionSpec], cfg: &RunConfig) -> Result<RunOutput> {
    let prep = prepare(clicks, specs, cfg)?;
    let (mut state, mut opts) = pretrain(clicks, specs, cfg, &prep)?;

    let split = prep.split_hour as f64;
    let horizon = prep.horizon_hour as f64;
    let events = schedule_events(clicks, specs, cfg.method, cfg.esdfm_window_hours, split, horizon)?;
    for pair in events.windows(2) {
        if pair[1].time < pair[0].time {
            return Err(Error::EventOrder { prev: pair[0].time, at: pair[1].time });
        }
    }

    let spec_index: BTreeMap<u32, usize> =
        specs.iter().enumerate().map(|(j, s)| (s.action_id, j)).collect();

    let mut theta_grad = CvrGrad::zeroed_like(&state.theta);
    let mut delayed_grad = state.delayed.as_ref().map(CvrGrad::zeroed_like);
    let mut phi_grad = state.phi.as_ref().map(ActionGrad::zeroed_like);

    let mut hour_rows: Vec<(u32, Vec<f64>, Vec<bool>)> = Vec::new();
    let mut n_eval_clicks = 0u64;
    let mut n_train_events = 0u64;
    let mut weight_reestimates = 0u32;
    let mut event_cursor = 0usize;
    let mut eval_cursor = 0usize;

    for hour in prep.split_hour..prep.horizon_hour {
        let h_lo = hour as f64;
        let h_hi = h_lo + 1.0;

        if let (Method::Gdfm, Some(every)) = (cfg.method, cfg.reestimate_weights_every_hours) {
            let elapsed = hour - prep.split_hour;
            if elapsed > 0 && elapsed % every == 0 {
                let matured: Vec<ClickEvent> = clicks
                    .iter()
                    .filter(|c| c.click_time_hours + prep.delta_y <= h_lo)
                    .cloned()
                    .collect();
                if matured.len() >= cfg.min_labeled {
                    state.weights =
                        Some(estimate_weights(&matured, specs, prep.delta_y, cfg.alpha, cfg.beta)?);
                    weight_reestimates += 1;
                }
            }
        }

        let mut scores = Vec::new();
        let mut labels = Vec::new();
        while eval_cursor < prep.stream_idx.len() {
            let c = &clicks[prep.stream_idx[eval_cursor]];
            if c.click_time_hours >= h_hi {
                break;
            }
            scores.push(state.theta.predict_cvr(&c.features));
            labels.push(c.converts);
            eval_cursor += 1;
        }
        n_eval_clicks += scores.len() as u64;
        hour_rows.push((hour, scores, labels));

        let start = event_cursor;
        while event_cursor < events.len() && events[event_cursor].time < h_hi {
            event_cursor += 1;
        }
        let mut hour_events: Vec<TrainEvent> = events[start..event_cursor].to_vec();
        if hour_events.is_empty() {
            continue;
        }
        let mut rng = seeded_rng(mix_seed(mix_seed(cfg.seed, TAG_STREAM_SHUFFLE), hour as u64));
        shuffle(&mut hour_events, &mut rng);

        for chunk in hour_events.chunks(cfg.batch_size) {
            theta_grad.reset();
            if let Some(g) = delayed_grad.as_mut() {
                g.reset();
            }
            if let Some(g) = phi_grad.as_mut() {
                g.reset();
            }
            let mut n_theta = 0u64;
            let mut n_delayed = 0u64;
            let mut n_phi = 0u64;
            for ev in chunk {
                let c = &clicks[ev.click_idx];
                let x = &c.features;
                match ev.kind {
                    TrainEventKind::Plain { y } => {
                        losses::loss_delayed_label(&state.theta, x, y, &mut theta_grad)?;
                        n_theta += 1;
                    }
                    TrainEventKind::Fnw { y_obs } => {
                        losses::loss_fnw(&state.theta, x, y_obs, &mut theta_grad)?;
                        n_theta += 1;
                    }
                    TrainEventKind::Esdfm { y_obs } => {
                        losses::loss_esdfm(
                            &state.theta,
                            state.aux_dp.as_ref().expect("esdfm aux_dp"),
                            state.aux_in.as_ref().expect("esdfm aux_in"),
                            x,
                            y_obs,
                            &mut theta_grad,
                        )?;
                        n_theta += 1;
                    }
                    TrainEventKind::Action { action_id, outcome } => {
                        let j = spec_index[&action_id];
                        let w = state.weights.as_ref().expect("gdfm weights").weights[j];
                        losses::loss_total(
                            &state.theta,
                            state.phi.as_ref().expect("gdfm phi"),
                            state.delayed.as_ref().expect("gdfm delayed"),
                            x,
                            outcome,
                            action_id,
                            w,
                            cfg.lambda,
                            &mut theta_grad,
                        )?;
                        n_theta += 1;
                    }
                    TrainEventKind::Label { converted } => {
                        let j = spec_index[&prep.label_id];
                        let w = state.weights.as_ref().expect("gdfm weights").weights[j];
                        let phi = state.phi.as_ref().expect("gdfm phi");
                        losses::loss_total(
                            &state.theta,
                            phi,
                            state.delayed.as_ref().expect("gdfm delayed"),
                            x,
                            u32::from(converted),
                            prep.label_id,
                            w,
                            cfg.lambda,
                            &mut theta_grad,
                        )?;
                        n_theta += 1;
                        losses::loss_delayed_label(
                            state.delayed.as_ref().expect("gdfm delayed"),
                            x,
                            converted,
                            delayed_grad.as_mut().expect("delayed grad"),
                        )?;
                        n_delayed += 1;
                        for (jj, spec) in specs.iter().enumerate() {
                            if spec.action_id == prep.label_id
                                || spec.reveal_delay_hours > prep.delta_y
                            {
                                continue;
                            }
                            losses::loss_action(
                                phi,
                                x,
                                converted,
                                c.actions[jj],
                                spec.action_id,
                                phi_grad.as_mut().expect("phi grad"),
                            )?;
                            n_phi += 1;
                        }
                    }
                }
            }
            n_train_events += chunk.len() as u64;
            if n_theta > 0 {
                opts.theta.apply_update(&mut state.theta, &theta_grad, 1.0 / n_theta as f64)?;
            }
            if n_delayed > 0 {
                opts.delayed.as_mut().expect("delayed optimizer").apply_update(
                    state.delayed.as_mut().expect("gdfm delayed"),
                    delayed_grad.as_ref().expect("delayed grad"),
                    1.0 / n_delayed as f64,
                )?;
            }
            if n_phi > 0 {
                opts.phi.as_mut().expect("phi optimizer").apply_update(
                    state.phi.as_mut().expect("gdfm phi"),
                    phi_grad.as_ref().expect("phi grad"),
                    1.0 / n_phi as f64,
                )?;
            }
        }
    }

    let clamp_events = state.theta.clamp_count()
        + state.delayed.as_ref().map_or(0, |m| m.clamp_count())
        + state.phi.as_ref().map_or(0, |m| m.clamp_count())
        + state.aux_dp.as_ref().map_or(0, |m| m.clamp_count())
        + state.aux_in.as_ref().map_or(0, |m| m.clamp_count());

    let report = RunReport {
        method: cfg.method,
        seed: cfg.seed,
        split_hour: prep.split_hour,
        horizon_hour: prep.horizon_hour,
        n_pretrain_clicks: prep.pretrain_idx.len() as u64,
        n_eval_clicks,
        n_train_events,
        weight_reestimates,
        weights: state.weights.as_ref().map(|w| w.weights.clone()),
        clamp_events,
        metrics: MetricsReport::from_hours(hour_rows)?,
    };
    Ok(RunOutput { report, state })
}

/// Suite over a methods-by-seeds grid on one fixed stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub run: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub method: Method,
    pub seed: u64,
    pub avg_auc: Option<f64>,
    pub avg_pr_auc: Option<f64>,
    pub avg_nll: Option<f64>,
    /// Improvement over the pretrained model as a share of the oracle's,
    /// in percent; present when the suite anchors exist for this seed.
    pub rel_auc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: u32,
    pub mean_auc: Option<f64>,
    pub std_auc: Option<f64>,
    pub mean_pr_auc: Option<f64>,
    pub std_pr_auc: Option<f64>,
    pub mean_nll: Option<f64>,
    pub std_nll: Option<f64>,
    pub mean_rel_auc: Option<f64>,
    pub std_rel_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<RunRow>,
    pub summaries: Vec<MethodSummary>,
    /// True when at least one child run failed.
    pub partial: bool,
}

/// Runs every (method, seed) pair, in parallel when enabled, each child on
/// the sequential path so results match across execution modes.
pub fn run_experiment_suite(
    clicks: &[ClickEvent],
    specs: &[ActionSpec],
    cfg: &SuiteConfig,
    par: Parallelism,
) -> Result<SuiteReport> {
    if cfg.methods.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::config("suite", "need at least one method and one seed"));
    }
    cfg.run.validate()?;
    let pairs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<(Method, u64, std::result::Result<RunReport, String>)> =
        map_indexed(par, pairs.len(), |i| {
            let (method, seed) = pairs[i];
            let mut child = cfg.run.clone();
            child.method = method;
            child.seed = seed;
            let res = run_method(clicks, specs, &child)
                .map(|out| out.report)
                .map_err(|e| e.to_string());
            (method, seed, res)
        });

    let mut anchor_pre: BTreeMap<u64, f64> = BTreeMap::new();
    let mut anchor_oracle: BTreeMap<u64, f64> = BTreeMap::new();
    for (method, seed, res) in &results {
        if let Ok(report) = res {
            if let Some(auc) = report.metrics.avg_auc {
                match method {
                    Method::Pretrain => {
                        anchor_pre.insert(*seed, auc);
                    }
                    Method::Oracle => {
                        anchor_oracle.insert(*seed, auc);
                    }
                    _ => {}
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(results.len());
    let mut partial = false;
    for (method, seed, res) in &results {
        match res {
            Ok(report) => {
                let rel_auc = match (report.metrics.avg_auc, anchor_pre.get(seed), anchor_oracle.get(seed)) {
                    (Some(auc), Some(&pre), Some(&oracle)) => {
                        relative_improvement(auc, pre, oracle).ok()
                    }
                    _ => None,
                };
                rows.push(RunRow {
                    method: *method,
                    seed: *seed,
                    avg_auc: report.metrics.avg_auc,
                    avg_pr_auc: report.metrics.avg_pr_auc,
                    avg_nll: report.metrics.avg_nll,
                    rel_auc,
                    error: None,
                });
            }
            Err(msg) => {
                partial = true;
                rows.push(RunRow {
                    method: *method,
                    seed: *seed,
                    avg_auc: None,
                    avg_pr_auc: None,
                    avg_nll: None,
                    rel_auc: None,
                    error: Some(msg.clone()),
                });
            }
        }
    }

    let mut summaries = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let ok: Vec<&RunRow> =
            rows.iter().filter(|r| r.method == method && r.error.is_none()).collect();
        let collect = |get: &dyn Fn(&RunRow) -> Option<f64>| -> Vec<f64> {
            ok.iter().filter_map(|r| get(r)).collect()
        };
        let (mean_auc, std_auc) = std_mean(&collect(&|r| r.avg_auc));
        let (mean_pr_auc, std_pr_auc) = std_mean(&collect(&|r| r.avg_pr_auc));
        let (mean_nll, std_nll) = std_mean(&collect(&|r| r.avg_nll));
        let (mean_rel_auc, std_rel_auc) = std_mean(&collect(&|r| r.rel_auc));
        summaries.push(MethodSummary {
            method,
            n_ok: ok.len() as u32,
            mean_auc,
            std_auc,
            mean_pr_auc,
            std_pr_auc,
            mean_nll,
            std_nll,
            mean_rel_auc,
            std_rel_auc,
        });
    }
    Ok(SuiteReport { rows, summaries, partial })
}

/// Writes every populated model of a run into one checkpoint file, with
/// the weights and dimensions in the header.
pub fn save_state(path: &Path, state: &TrainedState, extra_meta: serde_json::Value) -> Result<()> {
    let mut sections = state.theta.export_sections("theta");
    if let Some(m) = &state.delayed {
        sections.extend(m.export_sections("delayed"));
    }
    if let Some(m) = &state.phi {
        sections.extend(m.export_sections("phi"));
    }
    if let Some(m) = &state.aux_dp {
        sections.extend(m.export_sections("aux_dp"));
    }
    if let Some(m) = &state.aux_in {
        sections.extend(m.export_sections("aux_in"));
    }
    let meta = json!({
        "dims": state.dims,
        "weights": state.weights,
        "has": {
            "delayed": state.delayed.is_some(),
            "phi": state.phi.is_some(),
            "aux_dp": state.aux_dp.is_some(),
            "aux_in": state.aux_in.is_some(),
        },
        "extra": extra_meta,
    });
    write_checkpoint(path, &meta, &sections)
}

/// Reads a checkpoint written by [`save_state`]. The action specs are
/// needed to rebuild the action model's heads.
pub fn load_state(path: &Path, specs: &[ActionSpec]) -> Result<(serde_json::Value, TrainedState)> {
    let (meta, sections) = read_checkpoint(path)?;
    let dims: ModelDims = serde_json::from_value(
        meta.get("dims").cloned().ok_or_else(|| Error::Checkpoint("missing dims in header".into()))?,
    )?;
    let weights: Option<WeightVector> = match meta.get("weights") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => None,
    };
    let has = |k: &str| {
        meta.get("has").and_then(|h| h.get(k)).and_then(|v| v.as_bool()).unwrap_or(false)
    };
    let map = SectionMap::new(sections);
    let theta = CvrModel::<f32>::import_sections(dims, "theta", &map)?;
    let delayed = if has("delayed") {
        Some(CvrModel::<f32>::import_sections(dims, "delayed", &map)?)
    } else {
        None
    };
    let phi = if has("phi") {
        Some(ActionModel::<f32>::import_sections(dims, specs, "phi", &map)?)
    } else {
        None
    };
    let aux_dp = if has("aux_dp") {
        Some(CvrModel::<f32>::import_sections(dims, "aux_dp", &map)?)
    } else {
        None
    };
    let aux_in = if has("aux_in") {
        Some(CvrModel::<f32>::import_sections(dims, "aux_in", &map)?)
    } else {
        None
    };
    Ok((meta, TrainedState { dims, theta, delayed, phi, aux_dp, aux_in, weights }))
}
