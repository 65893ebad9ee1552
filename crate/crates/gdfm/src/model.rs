//! Conversion model, action channel model, gradient buffers, optimizers,
//! and the on-disk checkpoint format.
//!
//! Parameters are stored as `f32` for training and checkpoints or as `f64`
//! for finite-difference verification; all arithmetic runs in `f64` either
//! way, so the two storages compute the same function up to storage
//! rounding.

use std::collections::BTreeSet;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{ActionSpec, FeatureVector};
use crate::error::{Error, Result};

/// Final logits are clamped to this band before the sigmoid or softmax so
/// probabilities stay strictly inside (0, 1). The clamp affects values
/// only; gradients pass through and clamp events are counted.
pub const LOGIT_CLAMP: f64 = 30.0;

const INIT_SPAN: f64 = 0.05;

/// Parameter storage scalar. Everything is computed in `f64`; this trait
/// only controls how parameters, gradients, and optimizer moments are held.
pub trait Real: Copy + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    const ZERO: Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    const ZERO: Self = 0.0;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    const ZERO: Self = 0.0;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_bins: u32,
    pub n_fields: u32,
    pub embed_dim: u32,
    pub hidden_dim: u32,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_bins", self.n_bins),
            ("n_fields", self.n_fields),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be >= 1"));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn init_vec<R: Real>(len: usize, rng: &mut impl Rng) -> Vec<R> {
    (0..len)
        .map(|_| R::from_f64(rng.random::<f64>() * 2.0 * INIT_SPAN - INIT_SPAN))
        .collect()
}

/// Pooled embedding of the feature slots: element-wise sum of the slot rows.
fn pool_embedding<R: Real>(embedding: &[R], d: usize, x: &FeatureVector) -> Vec<f64> {
    let mut e = vec![0.0f64; d];
    for &slot in &x.slots {
        let row = slot as usize * d;
        for j in 0..d {
            e[j] += embedding[row + j].to_f64();
        }
    }
    e
}

fn tanh_layer<R: Real>(w1: &[R], b1: &[R], e: &[f64], hidden: usize, d: usize) -> Vec<f64> {
    let mut h = Vec::with_capacity(hidden);
    for i in 0..hidden {
        let mut pre = b1[i].to_f64();
        let row = i * d;
        for j in 0..d {
            pre += w1[row + j].to_f64() * e[j];
        }
        h.push(pre.tanh());
    }
    h
}

/// Conversion-rate model `q_theta(y=1 | x)`: sum-pooled hashed embeddings,
/// one tanh hidden layer, sigmoid head.
#[derive(Debug)]
pub struct CvrModel<R: Real> {
    pub dims: ModelDims,
    embedding: Vec<R>,
    w1: Vec<R>,
    b1: Vec<R>,
    w2: Vec<R>,
    b2: R,
    clamp_events: AtomicU64,
}

impl<R: Real> Clone for CvrModel<R> {
    fn clone(&self) -> Self {
        CvrModel {
            dims: self.dims,
            embedding: self.embedding.clone(),
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2,
            clamp_events: AtomicU64::new(self.clamp_events.load(Ordering::Relaxed)),
        }
    }
}

/// Cached forward pass, consumed by gradient accumulation.
#[derive(Debug, Clone)]
pub struct CvrForward {
    pub e: Vec<f64>,
    pub h: Vec<f64>,
    pub logit: f64,
    pub p: f64,
}

impl<R: Real> CvrModel<R> {
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let d = dims.embed_dim as usize;
        let hidden = dims.hidden_dim as usize;
        Ok(CvrModel {
            dims,
            embedding: init_vec(dims.n_bins as usize * d, rng),
            w1: init_vec(hidden * d, rng),
            b1: vec![R::ZERO; hidden],
            w2: init_vec(hidden, rng),
            b2: R::ZERO,
            clamp_events: AtomicU64::new(0),
        })
    }

    /// All-zero parameters; predicts exactly 0.5 everywhere.
    pub fn zeroed(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.embed_dim as usize;
        let hidden = dims.hidden_dim as usize;
        Ok(CvrModel {
            dims,
            embedding: vec![R::ZERO; dims.n_bins as usize * d],
            w1: vec![R::ZERO; hidden * d],
            b1: vec![R::ZERO; hidden],
            w2: vec![R::ZERO; hidden],
            b2: R::ZERO,
            clamp_events: AtomicU64::new(0),
        })
    }

    pub fn param_count(&self) -> usize {
        self.embedding.len() + self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn clamp_count(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    fn clamp_logit(&self, raw: f64) -> f64 {
        if raw.abs() > LOGIT_CLAMP {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            raw.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        } else {
            raw
        }
    }

    pub fn forward(&self, x: &FeatureVector) -> CvrForward {
        let d = self.dims.embed_dim as usize;
        let hidden = self.dims.hidden_dim as usize;
        debug_assert_eq!(x.n_fields(), self.dims.n_fields as usize);
        let e = pool_embedding(&self.embedding, d, x);
        let h = tanh_layer(&self.w1, &self.b1, &e, hidden, d);
        let mut raw = self.b2.to_f64();
        for i in 0..hidden {
            raw += self.w2[i].to_f64() * h[i];
        }
        let logit = self.clamp_logit(raw);
        CvrForward { e, h, logit, p: sigmoid(logit) }
    }

    /// Predicted conversion probability, strictly inside (0, 1).
    pub fn predict_cvr(&self, x: &FeatureVector) -> f64 {
        self.forward(x).p
    }

    /// Adds `d_logit * dlogit/dparam` to `grad` for every parameter.
    pub fn accumulate_grad(&self, x: &FeatureVector, fwd: &CvrForward, d_logit: f64, grad: &mut CvrGrad<R>) -> Result<()> {
        if !d_logit.is_finite() {
            return Err(Error::NonFinite { context: "cvr upstream gradient".into() });
        }
        let d = self.dims.embed_dim as usize;
        let hidden = self.dims.hidden_dim as usize;
        grad.t.b2 = R::from_f64(grad.t.b2.to_f64() + d_logit);
        let mut de = vec![0.0f64; d];
        for i in 0..hidden {
            let hi = fwd.h[i];
            grad.t.w2[i] = R::from_f64(grad.t.w2[i].to_f64() + d_logit * hi);
            let dpre = d_logit * self.w2[i].to_f64() * (1.0 - hi * hi);
            grad.t.b1[i] = R::from_f64(grad.t.b1[i].to_f64() + dpre);
            let row = i * d;
            for j in 0..d {
                grad.t.w1[row + j] = R::from_f64(grad.t.w1[row + j].to_f64() + dpre * fwd.e[j]);
                de[j] += dpre * self.w1[row + j].to_f64();
            }
        }
        for &slot in &x.slots {
            grad.touched.insert(slot);
            let row = slot as usize * d;
            for j in 0..d {
                grad.t.embedding[row + j] = R::from_f64(grad.t.embedding[row + j].to_f64() + de[j]);
            }
        }
        Ok(())
    }

    /// Flat parameter vector in checkpoint section order:
    /// embedding, w1, b1, w2, b2.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.embedding.iter().map(|v| v.to_f64()));
        out.extend(self.w1.iter().map(|v| v.to_f64()));
        out.extend(self.b1.iter().map(|v| v.to_f64()));
        out.extend(self.w2.iter().map(|v| v.to_f64()));
        out.push(self.b2.to_f64());
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} params, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for v in self.embedding.iter_mut() {
            *v = R::from_f64(it.next().unwrap());
        }
        for v in self.w1.iter_mut() {
            *v = R::from_f64(it.next().unwrap());
        }
        for v in self.b1.iter_mut() {
            *v = R::from_f64(it.next().unwrap());
        }
        for v in self.w2.iter_mut() {
            *v = R::from_f64(it.next().unwrap());
        }
        self.b2 = R::from_f64(it.next().unwrap());
        Ok(())
    }
}

/// One tensor set shaped like a [`CvrModel`], used for gradients and
/// optimizer moments.
#[derive(Debug, Clone)]
pub struct CvrTensors<R: Real> {
    pub embedding: Vec<R>,
    pub w1: Vec<R>,
    pub b1: Vec<R>,
    pub w2: Vec<R>,
    pub b2: R,
}

impl<R: Real> CvrTensors<R> {
    fn zeroed_like(model: &CvrModel<R>) -> Self {
        CvrTensors {
            embedding: vec![R::ZERO; model.embedding.len()],
            w1: vec![R::ZERO; model.w1.len()],
            b1: vec![R::ZERO; model.b1.len()],
            w2: vec![R::ZERO; model.w2.len()],
            b2: R::ZERO,
        }
    }
}

/// Accumulated gradient for a [`CvrModel`]. Embedding rows that received
/// any contribution are tracked so resets and sparse optimizer steps touch
/// only those rows.
#[derive(Debug, Clone)]
pub struct CvrGrad<R: Real> {
    pub t: CvrTensors<R>,
    pub touched: BTreeSet<u32>,
    embed_dim: usize,
}

impl<R: Real> CvrGrad<R> {
    pub fn zeroed_like(model: &CvrModel<R>) -> Self {
        CvrGrad {
            t: CvrTensors::zeroed_like(model),
            touched: BTreeSet::new(),
            embed_dim: model.dims.embed_dim as usize,
        }
    }

    pub fn reset(&mut self) {
        let d = self.embed_dim;
        for &slot in &self.touched {
            let row = slot as usize * d;
            for v in &mut self.t.embedding[row..row + d] {
                *v = R::ZERO;
            }
        }
        self.touched.clear();
        self.t.w1.fill(R::ZERO);
        self.t.b1.fill(R::ZERO);
        self.t.w2.fill(R::ZERO);
        self.t.b2 = R::ZERO;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

fn step_slice<R: Real>(
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    scale: f64,
    p: &mut [R],
    g: &[R],
    m: &mut [R],
    v: &mut [R],
) {
    match kind {
        OptimizerKind::Sgd => {
            for i in 0..p.len() {
                let gi = g[i].to_f64() * scale;
                p[i] = R::from_f64(p[i].to_f64() - lr * gi);
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for i in 0..p.len() {
                let gi = g[i].to_f64() * scale;
                let mi = beta1 * m[i].to_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].to_f64() + (1.0 - beta2) * gi * gi;
                m[i] = R::from_f64(mi);
                v[i] = R::from_f64(vi);
                p[i] = R::from_f64(p[i].to_f64() - lr * (mi / bc1) / ((vi / bc2).sqrt() + eps));
            }
        }
    }
}

/// Optimizer state for a [`CvrModel`]. Embedding moments are updated
/// lazily: only rows touched by the current gradient move.
#[derive(Debug, Clone)]
pub struct CvrOptimizer<R: Real> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    m: CvrTensors<R>,
    v: CvrTensors<R>,
}

impl<R: Real> CvrOptimizer<R> {
    pub fn new(kind: OptimizerKind, lr: f64, model: &CvrModel<R>) -> Self {
        CvrOptimizer {
            kind,
            lr,
            step: 0,
            m: CvrTensors::zeroed_like(model),
            v: CvrTensors::zeroed_like(model),
        }
    }

    /// One optimizer step with the gradient scaled by `scale` (use
    /// `1 / batch_size` to turn accumulated sums into means).
    pub fn apply_update(&mut self, model: &mut CvrModel<R>, grad: &CvrGrad<R>, scale: f64) -> Result<()> {
        if model.embedding.len() != self.m.embedding.len() || model.embedding.len() != grad.t.embedding.len() {
            return Err(Error::ShapeMismatch("optimizer, model, and gradient disagree".into()));
        }
        self.step += 1;
        let d = model.dims.embed_dim as usize;
        for &slot in &grad.touched {
            let row = slot as usize * d;
            let r = row..row + d;
            step_slice(
                self.kind,
                self.lr,
                self.step,
                scale,
                &mut model.embedding[r.clone()],
                &grad.t.embedding[r.clone()],
                &mut self.m.embedding[r.clone()],
                &mut self.v.embedding[r],
            );
        }
        step_slice(self.kind, self.lr, self.step, scale, &mut model.w1, &grad.t.w1, &mut self.m.w1, &mut self.v.w1);
        step_slice(self.kind, self.lr, self.step, scale, &mut model.b1, &grad.t.b1, &mut self.m.b1, &mut self.v.b1);
        step_slice(self.kind, self.lr, self.step, scale, &mut model.w2, &grad.t.w2, &mut self.m.w2, &mut self.v.w2);
        let mut p = [model.b2];
        let mut m = [self.m.b2];
        let mut v = [self.v.b2];
        step_slice(self.kind, self.lr, self.step, scale, &mut p, &[grad.t.b2], &mut m, &mut v);
        model.b2 = p[0];
        self.m.b2 = m[0];
        self.v.b2 = v[0];
        Ok(())
    }
}

/// One softmax head of the action model.
#[derive(Debug, Clone)]
struct ActionHead<R: Real> {
    action_id: u32,
    cardinality: usize,
    w: Vec<R>,
    b: Vec<R>,
}

/// Action channel model `q_phi(a | x, y, delta)`: shared embeddings plus a
/// label embedding feed a tanh trunk with one softmax head per non-label
/// action. The label action has no trainable head; it is the identity
/// channel and predicts an exact one-hot on the label.
#[derive(Debug)]
pub struct ActionModel<R: Real> {
    pub dims: ModelDims,
    label_action_id: u32,
    head_of_action: Vec<Option<usize>>,
    heads: Vec<ActionHead<R>>,
    embedding: Vec<R>,
    y_embedding: Vec<R>,
    w1: Vec<R>,
    b1: Vec<R>,
    clamp_events: AtomicU64,
}

impl<R: Real> Clone for ActionModel<R> {
    fn clone(&self) -> Self {
        ActionModel {
            dims: self.dims,
            label_action_id: self.label_action_id,
            head_of_action: self.head_of_action.clone(),
            heads: self.heads.clone(),
            embedding: self.embedding.clone(),
            y_embedding: self.y_embedding.clone(),
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            clamp_events: AtomicU64::new(self.clamp_events.load(Ordering::Relaxed)),
        }
    }
}

/// Cached action-model forward pass for one (x, y, action) triple.
#[derive(Debug, Clone)]
pub struct ActionForward {
    pub e: Vec<f64>,
    pub h: Vec<f64>,
    pub probs: Vec<f64>,
    head: Option<usize>,
}

impl<R: Real> ActionModel<R> {
    pub fn init(dims: ModelDims, specs: &[ActionSpec], rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let label_action_id = crate::core::validate_specs(specs)?;
        let d = dims.embed_dim as usize;
        let hidden = dims.hidden_dim as usize;
        let embedding = init_vec(dims.n_bins as usize * d, rng);
        let y_embedding = init_vec(2 * d, rng);
        let w1 = init_vec(hidden * d, rng);
        let mut heads = Vec::new();
        let mut head_of_action = vec![None; specs.len()];
        for spec in specs {
            if spec.is_label_action {
                continue;
            }
            let k = spec.cardinality as usize;
            head_of_action[spec.action_id as usize] = Some(heads.len());
            heads.push(ActionHead {
                action_id: spec.action_id,
                cardinality: k,
                w: init_vec(k * hidden, rng),
                b: vec![R::ZERO; k],
            });
        }
        Ok(ActionModel {
            dims,
            label_action_id,
            head_of_action,
            heads,
            embedding,
            y_embedding,
            w1,
            b1: vec![R::ZERO; hidden],
            clamp_events: AtomicU64::new(0),
        })
    }

    pub fn label_action_id(&self) -> u32 {
        self.label_action_id
    }

    pub fn cardinality_of(&self, action_id: u32) -> Result<usize> {
        if action_id == self.label_action_id {
            return Ok(2);
        }
        let head = self
            .head_of_action
            .get(action_id as usize)
            .copied()
            .flatten()
            .ok_or(Error::UnknownAction(action_id))?;
        Ok(self.heads[head].cardinality)
    }

    pub fn param_count(&self) -> usize {
        self.embedding.len()
            + self.y_embedding.len()
            + self.w1.len()
            + self.b1.len()
            + self.heads.iter().map(|h| h.w.len() + h.b.len()).sum::<usize>()
    }

    pub fn clamp_count(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    pub fn forward(&self, x: &FeatureVector, y: bool, action_id: u32) -> Result<ActionForward> {
        if action_id == self.label_action_id {
            let yi = usize::from(y);
            let mut probs = vec![0.0; 2];
            probs[yi] = 1.0;
            return Ok(ActionForward { e: Vec::new(), h: Vec::new(), probs, head: None });
        }
        let head_idx = self
            .head_of_action
            .get(action_id as usize)
            .copied()
            .flatten()
            .ok_or(Error::UnknownAction(action_id))?;
        let head = &self.heads[head_idx];
        let d = self.dims.embed_dim as usize;
        let hidden = self.dims.hidden_dim as usize;
        let mut e = pool_embedding(&self.embedding, d, x);
        let yrow = usize::from(y) * d;
        for j in 0..d {
            e[j] += self.y_embedding[yrow + j].to_f64();
        }
        let h = tanh_layer(&self.w1, &self.b1, &e, hidden, d);
        let mut logits = Vec::with_capacity(head.cardinality);
        let mut clamped = false;
        for v in 0..head.cardinality {
            let mut z = head.b[v].to_f64();
            let row = v * hidden;
            for i in 0..hidden {
                z += head.w[row + i].to_f64() * h[i];
            }
            if z.abs() > LOGIT_CLAMP {
                clamped = true;
                z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            }
            logits.push(z);
        }
        if clamped {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
        }
        let zmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - zmax).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Ok(ActionForward { e, h, probs, head: Some(head_idx) })
    }

    /// Channel distribution `q_phi(a = . | x, y, delta_j)`. The label
    /// action returns the exact one-hot on `y`.
    pub fn predict_action(&self, x: &FeatureVector, y: bool, action_id: u32) -> Result<Vec<f64>> {
        Ok(self.forward(x, y, action_id)?.probs)
    }

    /// Adds `sum_v d_logits[v] * dlogit_v/dparam` to `grad`. Rejects the
    /// label action, whose channel is fixed.
    pub fn accumulate_grad(
        &self,
        x: &FeatureVector,
        y: bool,
        fwd: &ActionForward,
        d_logits: &[f64],
        grad: &mut ActionGrad<R>,
    ) -> Result<()> {
        let head_idx = fwd.head.ok_or(Error::UnknownAction(self.label_action_id))?;
        if d_logits.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite { context: "action upstream gradient".into() });
        }
        let head = &self.heads[head_idx];
        if d_logits.len() != head.cardinality {
            return Err(Error::ShapeMismatch(format!(
                "head {} expects {} logit grads, got {}",
                head.action_id,
                head.cardinality,
                d_logits.len()
            )));
        }
        let d = self.dims.embed_dim as usize;
        let hidden = self.dims.hidden_dim as usize;
        let ghead = &mut grad.heads[head_idx];
        let mut dh = vec![0.0f64; hidden];
        for v in 0..head.cardinality {
            let dz = d_logits[v];
            ghead.1[v] = R::from_f64(ghead.1[v].to_f64() + dz);
            let row = v * hidden;
            for i in 0..hidden {
                ghead.0[row + i] = R::from_f64(ghead.0[row + i].to_f64() + dz * fwd.h[i]);
                dh[i] += dz * head.w[row + i].to_f64();
            }
        }
        let mut de = vec![0.0f64; d];
        for i in 0..hidden {
            let dpre = dh[i] * (1.0 - fwd.h[i] * fwd.h[i]);
            grad.t.b1[i] = R::from_f64(grad.t.b1[i].to_f64() + dpre);
            let row = i * d;
            for j in 0..d {
                grad.t.w1[row + j] = R::from_f64(grad.t.w1[row + j].to_f64() + dpre * fwd.e[j]);
                de[j] += dpre * self.w1[row + j].to_f64();
            }
        }
        for &slot in &x.slots {
            grad.touched.insert(slot);
            let row = slot as usize * d;
            for j in 0..d {
                grad.t.embedding[row + j] = R::from_f64(grad.t.embedding[row + j].to_f64() + de[j]);
            }
        }
        let yrow = usize::from(y) * d;
        for j in 0..d {
            grad.t.y_embedding[yrow + j] = R::from_f64(grad.t.y_embedding[yrow + j].to_f64() + de[j]);
        }
        Ok(())
    }

    /// Flat parameters in order: embedding, y_embedding, w1, b1, then per
    /// head w, b.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.embedding.iter().map(|v| v.to_f64()));
        out.extend(self.y_embedding.iter().map(|v| v.to_f64()));
        out.extend(self.w1.iter().map(|v| v.to_f64()));
        out.extend(self.b1.iter().map(|v| v.to_f64()));
        for head in &self.heads {
            out.extend(head.w.iter().map(|v| v.to_f64()));
            out.extend(head.b.iter().map(|v| v.to_f64()));
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} params, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for v in self.embedding.iter_mut() {
            *v = R::from_f64(it.next().unwrap());
        }
        for v in self.y_embedding.iter_mut() {
            *v = R::from_f64(it.next().unwrap());
        }
        for v in self.w1.iter_mut() {
            *v = R::from_f64(it.next().unwrap());
        }
        for v in self.b1.iter_mut() {
            *v = R::from_f64(it.next().unwrap());
        }
        for head in &mut self.heads {
            for v in head.w.iter_mut() {
                *v = R::from_f64(it.next().unwrap());
            }
            for v in head.b.iter_mut() {
                *v = R::from_f64(it.next().unwrap());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ActionTensors<R: Real> {
    pub embedding: Vec<R>,
    pub y_embedding: Vec<R>,
    pub w1: Vec<R>,
    pub b1: Vec<R>,
}

impl<R: Real> ActionTensors<R> {
    fn zeroed_like(model: &ActionModel<R>) -> Self {
        ActionTensors {
            embedding: vec![R::ZERO; model.embedding.len()],
            y_embedding: vec![R::ZERO; model.y_embedding.len()],
            w1: vec![R::ZERO; model.w1.len()],
            b1: vec![R::ZERO; model.b1.len()],
        }
    }
}

/// Accumulated gradient for an [`ActionModel`]. Head gradients are stored
/// as (w, b) pairs aligned with the model's heads.
#[derive(Debug, Clone)]
pub struct ActionGrad<R: Real> {
    pub t: ActionTensors<R>,
    pub heads: Vec<(Vec<R>, Vec<R>)>,
    pub touched: BTreeSet<u32>,
    embed_dim: usize,
}

impl<R: Real> ActionGrad<R> {
    pub fn zeroed_like(model: &ActionModel<R>) -> Self {
        ActionGrad {
            t: ActionTensors::zeroed_like(model),
            heads: model
                .heads
                .iter()
                .map(|h| (vec![R::ZERO; h.w.len()], vec![R::ZERO; h.b.len()]))
                .collect(),
            touched: BTreeSet::new(),
            embed_dim: model.dims.embed_dim as usize,
        }
    }

    pub fn reset(&mut self) {
        let d = self.embed_dim;
        for &slot in &self.touched {
            let row = slot as usize * d;
            for v in &mut self.t.embedding[row..row + d] {
                *v = R::ZERO;
            }
        }
        self.touched.clear();
        self.t.y_embedding.fill(R::ZERO);
        self.t.w1.fill(R::ZERO);
        self.t.b1.fill(R::ZERO);
        for (w, b) in &mut self.heads {
            w.fill(R::ZERO);
            b.fill(R::ZERO);
        }
    }
}

/// Optimizer state for an [`ActionModel`].
#[derive(Debug, Clone)]
pub struct ActionOptimizer<R: Real> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    m: ActionTensors<R>,
    v: ActionTensors<R>,
    m_heads: Vec<(Vec<R>, Vec<R>)>,
    v_heads: Vec<(Vec<R>, Vec<R>)>,
}

impl<R: Real> ActionOptimizer<R> {
    pub fn new(kind: OptimizerKind, lr: f64, model: &ActionModel<R>) -> Self {
        let heads = || {
            model
                .heads
                .iter()
                .map(|h| (vec![R::ZERO; h.w.len()], vec![R::ZERO; h.b.len()]))
                .collect::<Vec<_>>()
        };
        ActionOptimizer {
            kind,
            lr,
            step: 0,
            m: ActionTensors::zeroed_like(model),
            v: ActionTensors::zeroed_like(model),
            m_heads: heads(),
            v_heads: heads(),
        }
    }

    pub fn apply_update(&mut self, model: &mut ActionModel<R>, grad: &ActionGrad<R>, scale: f64) -> Result<()> {
        if model.embedding.len() != self.m.embedding.len()
            || model.embedding.len() != grad.t.embedding.len()
            || model.heads.len() != grad.heads.len()
        {
            return Err(Error::ShapeMismatch("optimizer, model, and gradient disagree".into()));
        }
        self.step += 1;
        let d = model.dims.embed_dim as usize;
        for &slot in &grad.touched {
            let row = slot as usize * d;
            let r = row..row + d;
            step_slice(
                self.kind,
                self.lr,
                self.step,
                scale,
                &mut model.embedding[r.clone()],
                &grad.t.embedding[r.clone()],
                &mut self.m.embedding[r.clone()],
                &mut self.v.embedding[r],
            );
        }
        step_slice(
            self.kind,
            self.lr,
            self.step,
            scale,
            &mut model.y_embedding,
            &grad.t.y_embedding,
            &mut self.m.y_embedding,
            &mut self.v.y_embedding,
        );
        step_slice(self.kind, self.lr, self.step, scale, &mut model.w1, &grad.t.w1, &mut self.m.w1, &mut self.v.w1);
        step_slice(self.kind, self.lr, self.step, scale, &mut model.b1, &grad.t.b1, &mut self.m.b1, &mut self.v.b1);
        for (i, head) in model.heads.iter_mut().enumerate() {
            step_slice(
                self.kind,
                self.lr,
                self.step,
                scale,
                &mut head.w,
                &grad.heads[i].0,
                &mut self.m_heads[i].0,
                &mut self.v_heads[i].0,
            );
            step_slice(
                self.kind,
                self.lr,
                self.step,
                scale,
                &mut head.b,
                &grad.heads[i].1,
                &mut self.m_heads[i].1,
                &mut self.v_heads[i].1,
            );
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 4] = b"GDFM";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    meta: serde_json::Value,
    sections: Vec<SectionDesc>,
}

#[derive(Serialize, Deserialize)]
struct SectionDesc {
    name: String,
    len: u64,
}

/// Writes a checkpoint: `GDFM` magic, version (u32 LE), header length
/// (u64 LE), a JSON header describing the sections, then each section as a
/// raw little-endian f32 array in declared order.
pub fn write_checkpoint(path: &Path, meta: &serde_json::Value, sections: &[(String, Vec<f32>)]) -> Result<()> {
    let header = CheckpointHeader {
        meta: meta.clone(),
        sections: sections
            .iter()
            .map(|(name, data)| SectionDesc { name: name.clone(), len: data.len() as u64 })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, data) in sections {
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`], returning the meta
/// document and the named sections in file order.
pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Vec<f32>)>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fail("truncated magic"))?;
    if &magic != CKPT_MAGIC {
        return Err(fail("bad magic"));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|_| fail("truncated version"))?;
    let version = u32::from_le_bytes(v4);
    if version != CKPT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8).map_err(|_| fail("truncated header length"))?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| fail("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let mut sections = Vec::with_capacity(header.sections.len());
    for desc in &header.sections {
        let mut bytes = vec![0u8; desc.len as usize * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| fail(&format!("truncated section `{}`", desc.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        sections.push((desc.name.clone(), data));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fail("trailing bytes after declared sections"));
    }
    Ok((header.meta, sections))
}

impl CvrModel<f32> {
    /// Checkpoint sections for this model under `prefix.`.
    pub fn export_sections(&self, prefix: &str) -> Vec<(String, Vec<f32>)> {
        vec![
            (format!("{prefix}.embedding"), self.embedding.clone()),
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.b1"), self.b1.clone()),
            (format!("{prefix}.w2"), self.w2.clone()),
            (format!("{prefix}.b2"), vec![self.b2]),
        ]
    }

    pub fn import_sections(dims: ModelDims, prefix: &str, sections: &SectionMap) -> Result<Self> {
        let mut model = CvrModel::<f32>::zeroed(dims)?;
        model.embedding = sections.take(&format!("{prefix}.embedding"), model.embedding.len())?;
        model.w1 = sections.take(&format!("{prefix}.w1"), model.w1.len())?;
        model.b1 = sections.take(&format!("{prefix}.b1"), model.b1.len())?;
        model.w2 = sections.take(&format!("{prefix}.w2"), model.w2.len())?;
        model.b2 = sections.take(&format!("{prefix}.b2"), 1)?[0];
        Ok(model)
    }
}

impl ActionModel<f32> {
    pub fn export_sections(&self, prefix: &str) -> Vec<(String, Vec<f32>)> {
        let mut out = vec![
            (format!("{prefix}.embedding"), self.embedding.clone()),
            (format!("{prefix}.y_embedding"), self.y_embedding.clone()),
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.b1"), self.b1.clone()),
        ];
        for head in &self.heads {
            out.push((format!("{prefix}.head{}.w", head.action_id), head.w.clone()));
            out.push((format!("{prefix}.head{}.b", head.action_id), head.b.clone()));
        }
        out
    }

    pub fn import_sections(
        dims: ModelDims,
        specs: &[ActionSpec],
        prefix: &str,
        sections: &SectionMap,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = ActionModel::<f32>::init(dims, specs, &mut rng)?;
        model.embedding = sections.take(&format!("{prefix}.embedding"), model.embedding.len())?;
        model.y_embedding = sections.take(&format!("{prefix}.y_embedding"), model.y_embedding.len())?;
        model.w1 = sections.take(&format!("{prefix}.w1"), model.w1.len())?;
        model.b1 = sections.take(&format!("{prefix}.b1"), model.b1.len())?;
        for head in &mut model.heads {
            head.w = sections.take(&format!("{prefix}.head{}.w", head.action_id), head.w.len())?;
            head.b = sections.take(&format!("{prefix}.head{}.b", head.action_id), head.b.len())?;
        }
        Ok(model)
    }
}

/// Section lookup for checkpoint import with length validation.
pub struct SectionMap {
    map: std::collections::BTreeMap<String, Vec<f32>>,
}

impl SectionMap {
    pub fn new(sections: Vec<(String, Vec<f32>)>) -> Self {
        SectionMap { map: sections.into_iter().collect() }
    }

    pub fn take(&self, name: &str, expect_len: usize) -> Result<Vec<f32>> {
        let data = self
            .map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))?;
        if data.len() != expect_len {
            return Err(Error::Checkpoint(format!(
                "section `{name}` has {} values, expected {expect_len}",
                data.len()
            )));
        }
        Ok(data.clone())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims { n_bins: 16, n_fields: 3, embed_dim: 4, hidden_dim: 6 }
    }

    fn specs() -> Vec<ActionSpec> {
        vec![
            ActionSpec { action_id: 0, reveal_delay_hours: 1.0, cardinality: 3, is_label_action: false },
            ActionSpec { action_id: 1, reveal_delay_hours: 24.0, cardinality: 2, is_label_action: true },
        ]
    }

    fn x() -> FeatureVector {
        FeatureVector::new(vec![1, 5, 5])
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = CvrModel::<f64>::zeroed(dims()).unwrap();
        assert_eq!(m.predict_cvr(&x()), 0.5);
    }

    #[test]
    fn predictions_are_deterministic_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = CvrModel::<f32>::init(dims(), &mut rng).unwrap();
        let p1 = m.predict_cvr(&x());
        let p2 = m.predict_cvr(&x());
        assert_eq!(p1, p2);
        assert!(p1 > 0.0 && p1 < 1.0);
    }

    #[test]
    fn action_model_label_channel_is_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = ActionModel::<f64>::init(dims(), &specs(), &mut rng).unwrap();
        assert_eq!(m.predict_action(&x(), true, 1).unwrap(), vec![0.0, 1.0]);
        assert_eq!(m.predict_action(&x(), false, 1).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn action_probs_sum_to_one_and_depend_on_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ActionModel::<f64>::init(dims(), &specs(), &mut rng).unwrap();
        let p0 = m.predict_action(&x(), false, 0).unwrap();
        let p1 = m.predict_action(&x(), true, 0).unwrap();
        assert!((p0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(p0, p1);
    }

    #[test]
    fn unknown_action_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ActionModel::<f64>::init(dims(), &specs(), &mut rng).unwrap();
        assert!(matches!(m.predict_action(&x(), false, 9), Err(Error::UnknownAction(9))));
    }

    #[test]
    fn clamp_counter_fires_on_extreme_logits() {
        let mut m = CvrModel::<f64>::zeroed(dims()).unwrap();
        let mut params = m.params_flat();
        let n = params.len();
        params[n - 1] = 1000.0;
        m.set_params_flat(&params).unwrap();
        let p = m.predict_cvr(&x());
        assert!(m.clamp_count() == 1);
        assert!(p < 1.0 && p > 0.5);
    }

    #[test]
    fn gradients_accumulate_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = CvrModel::<f64>::init(dims(), &mut rng).unwrap();
        let xa = FeatureVector::new(vec![0, 1, 2]);
        let xb = FeatureVector::new(vec![3, 4, 5]);
        let fa = m.forward(&xa);
        let fb = m.forward(&xb);

        let mut g_both = CvrGrad::zeroed_like(&m);
        m.accumulate_grad(&xa, &fa, 0.7, &mut g_both).unwrap();
        m.accumulate_grad(&xb, &fb, -0.2, &mut g_both).unwrap();

        let mut g_a = CvrGrad::zeroed_like(&m);
        m.accumulate_grad(&xa, &fa, 0.7, &mut g_a).unwrap();
        let mut g_b = CvrGrad::zeroed_like(&m);
        m.accumulate_grad(&xb, &fb, -0.2, &mut g_b).unwrap();

        for (i, (a, b)) in g_a.t.embedding.iter().zip(&g_b.t.embedding).enumerate() {
            assert!((g_both.t.embedding[i] - (a + b)).abs() < 1e-15);
        }
        assert!((g_both.t.b2 - (g_a.t.b2 + g_b.t.b2)).abs() < 1e-15);
        assert_eq!(g_both.touched.len(), 6);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut m = CvrModel::<f64>::zeroed(dims()).unwrap();
        let before = m.params_flat();
        let mut opt = CvrOptimizer::new(OptimizerKind::adam_default(), 0.001, &m);
        let mut g = CvrGrad::zeroed_like(&m);
        let fwd = m.forward(&x());
        m.accumulate_grad(&x(), &fwd, 1.0, &mut g).unwrap();
        opt.apply_update(&mut m, &g, 1.0).unwrap();
        let after = m.params_flat();
        let n = after.len();
        // d(logit)/d(b2) = 1, so b2 moves by almost exactly -lr on step one.
        assert!((after[n - 1] - (before[n - 1] - 0.001)).abs() < 1e-8);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn sgd_step_is_exactly_lr_times_grad() {
        let mut m = CvrModel::<f64>::zeroed(dims()).unwrap();
        let mut opt = CvrOptimizer::new(OptimizerKind::Sgd, 0.5, &m);
        let mut g = CvrGrad::zeroed_like(&m);
        let fwd = m.forward(&x());
        m.accumulate_grad(&x(), &fwd, 2.0, &mut g).unwrap();
        opt.apply_update(&mut m, &g, 0.5).unwrap();
        let after = m.params_flat();
        // b2 grad is 2.0, scaled by 0.5, times lr 0.5 => 0.5 decrease.
        assert!((after[after.len() - 1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn grad_reset_clears_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = CvrModel::<f64>::init(dims(), &mut rng).unwrap();
        let mut g = CvrGrad::zeroed_like(&m);
        let fwd = m.forward(&x());
        m.accumulate_grad(&x(), &fwd, 1.0, &mut g).unwrap();
        assert!(!g.touched.is_empty());
        g.reset();
        assert!(g.touched.is_empty());
        assert!(g.t.embedding.iter().all(|v| *v == 0.0));
        assert!(g.t.w1.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gdfm");
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let m = CvrModel::<f32>::init(dims(), &mut rng).unwrap();
        let a = ActionModel::<f32>::init(dims(), &specs(), &mut rng).unwrap();
        let mut sections = m.export_sections("theta");
        sections.extend(a.export_sections("phi"));
        let meta = serde_json::json!({"seed": 123u64, "dims": dims()});
        write_checkpoint(&path, &meta, &sections).unwrap();

        let (meta2, sections2) = read_checkpoint(&path).unwrap();
        assert_eq!(meta2["seed"], 123);
        let map = SectionMap::new(sections2);
        let m2 = CvrModel::<f32>::import_sections(dims(), "theta", &map).unwrap();
        let a2 = ActionModel::<f32>::import_sections(dims(), &specs(), "phi", &map).unwrap();
        assert_eq!(m.params_flat(), m2.params_flat());
        assert_eq!(a.params_flat(), a2.params_flat());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gdfm");
        let m = CvrModel::<f32>::zeroed(dims()).unwrap();
        write_checkpoint(&path, &serde_json::json!({}), &m.export_sections("theta")).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn param_count_matches_layout() {
        let m = CvrModel::<f64>::zeroed(dims()).unwrap();
        assert_eq!(m.param_count(), 16 * 4 + 6 * 4 + 6 + 6 + 1);
        assert_eq!(m.params_flat().len(), m.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ActionModel::<f64>::init(dims(), &specs(), &mut rng).unwrap();
        assert_eq!(a.param_count(), 16 * 4 + 2 * 4 + 6 * 4 + 6 + (3 * 6 + 3));
        assert_eq!(a.params_flat().len(), a.param_count());
    }
}
