//! Per-event training losses. Every function returns the loss value and
//! adds its parameter gradient into the caller's buffer, so summing calls
//! over a minibatch accumulates the batch gradient.

use crate::core::FeatureVector;
use crate::error::{Error, Result};
use crate::model::{ActionGrad, ActionModel, CvrGrad, CvrModel, Real};

/// ln(1 + e^z), stable for large |z|.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a sigmoid logit against label `y`, with its
/// logit gradient `p - y`.
fn bce_parts(logit: f64, p: f64, y: bool) -> (f64, f64) {
    let value = if y { softplus(-logit) } else { softplus(logit) };
    (value, p - f64::from(y))
}

fn check_finite(value: f64, context: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { context: context.into() })
    }
}

/// Action-channel likelihood loss `-ln q_phi(a | x, y, delta)`.
///
/// Trains the channel model on matured samples where the true label is
/// known. The label action has no trainable channel and is rejected.
pub fn loss_action<R: Real>(
    phi: &ActionModel<R>,
    x: &FeatureVector,
    y: bool,
    a: u32,
    action_id: u32,
    grad: &mut ActionGrad<R>,
) -> Result<f64> {
    if action_id == phi.label_action_id() {
        return Err(Error::UnknownAction(action_id));
    }
    let fwd = phi.forward(x, y, action_id)?;
    let k = fwd.probs.len();
    if a as usize >= k {
        return Err(Error::ShapeMismatch(format!(
            "action {action_id} outcome {a} exceeds cardinality {k}"
        )));
    }
    let value = -fwd.probs[a as usize].ln();
    let mut d_logits = fwd.probs.clone();
    d_logits[a as usize] -= 1.0;
    phi.accumulate_grad(x, y, &fwd, &d_logits, grad)?;
    check_finite(value, "action loss")
}

/// Cross-entropy against the matured label, for the delayed model copy and
/// for oracle or matured-label baselines.
pub fn loss_delayed_label<R: Real>(
    model: &CvrModel<R>,
    x: &FeatureVector,
    y: bool,
    grad: &mut CvrGrad<R>,
) -> Result<f64> {
    let fwd = model.forward(x);
    let (value, d_logit) = bce_parts(fwd.logit, fwd.p, y);
    model.accumulate_grad(x, &fwd, d_logit, grad)?;
    check_finite(value, "delayed label loss")
}

/// Mixture likelihood of an observed action under the current conversion
/// model: value and logit gradient, the channel held fixed.
fn proxy_parts<R: Real>(
    theta: &CvrModel<R>,
    phi: &ActionModel<R>,
    x: &FeatureVector,
    a: u32,
    action_id: u32,
) -> Result<(crate::model::CvrForward, f64, f64)> {
    let fwd = theta.forward(x);
    let c1 = phi.predict_action(x, true, action_id)?;
    let c0 = phi.predict_action(x, false, action_id)?;
    let k = c1.len();
    if a as usize >= k {
        return Err(Error::ShapeMismatch(format!(
            "action {action_id} outcome {a} exceeds cardinality {k}"
        )));
    }
    let (c1, c0) = (c1[a as usize], c0[a as usize]);
    let mix = c1 * fwd.p + c0 * (1.0 - fwd.p);
    if !(mix > 0.0) {
        return Err(Error::NonFinite { context: format!("proxy mixture for action {action_id}") });
    }
    let value = -mix.ln();
    let d_logit = -(c1 - c0) / mix * fwd.p * (1.0 - fwd.p);
    Ok((fwd, value, d_logit))
}

/// Proxy feedback loss `-ln sum_y q_phi(a | x, y, delta) q_theta(y | x)`.
///
/// Gradients flow into `theta` only; the channel model is frozen. For the
/// label action the mixture collapses to the label likelihood itself.
pub fn loss_proxy<R: Real>(
    theta: &CvrModel<R>,
    phi: &ActionModel<R>,
    x: &FeatureVector,
    a: u32,
    action_id: u32,
    grad: &mut CvrGrad<R>,
) -> Result<f64> {
    let (fwd, value, d_logit) = proxy_parts(theta, phi, x, a, action_id)?;
    theta.accumulate_grad(x, &fwd, d_logit, grad)?;
    check_finite(value, "proxy loss")
}

/// KL(q_delayed || q_theta) for one sample: value and theta logit gradient.
fn reg_parts<R: Real>(
    theta: &CvrModel<R>,
    delayed: &CvrModel<R>,
    x: &FeatureVector,
) -> (crate::model::CvrForward, f64, f64) {
    let fwd = theta.forward(x);
    let qd = delayed.predict_cvr(x);
    let q = fwd.p;
    let value = qd * (qd / q).ln() + (1.0 - qd) * ((1.0 - qd) / (1.0 - q)).ln();
    (fwd, value, q - qd)
}

/// Anchoring regularizer: KL divergence from the delayed model copy to the
/// live model. Gradients flow into `theta` only.
pub fn loss_reg<R: Real>(
    theta: &CvrModel<R>,
    delayed: &CvrModel<R>,
    x: &FeatureVector,
    grad: &mut CvrGrad<R>,
) -> Result<f64> {
    let (fwd, value, d_logit) = reg_parts(theta, delayed, x);
    theta.accumulate_grad(x, &fwd, d_logit, grad)?;
    check_finite(value, "regularizer loss")
}

/// Per-event training objective: `weight * proxy + lambda * reg`, with a
/// single fused gradient accumulation into `theta`.
pub fn loss_total<R: Real>(
    theta: &CvrModel<R>,
    phi: &ActionModel<R>,
    delayed: &CvrModel<R>,
    x: &FeatureVector,
    a: u32,
    action_id: u32,
    weight: f64,
    lambda: f64,
    grad: &mut CvrGrad<R>,
) -> Result<f64> {
    if !weight.is_finite() || !lambda.is_finite() {
        return Err(Error::NonFinite { context: "loss_total coefficients".into() });
    }
    let (fwd, v_proxy, d_proxy) = proxy_parts(theta, phi, x, a, action_id)?;
    let (_, v_reg, d_reg) = reg_parts(theta, delayed, x);
    let value = weight * v_proxy + lambda * v_reg;
    theta.accumulate_grad(x, &fwd, weight * d_proxy + lambda * d_reg, grad)?;
    check_finite(value, "total loss")
}

/// Importance-weighted loss for the fake-negative duplicated stream.
///
/// Every click enters as an immediate negative; converters are replayed as
/// positives at conversion time. With `q_hat` the gradient-stopped current
/// prediction, positives weigh `1 + q_hat` and negatives
/// `(1 - q_hat)(1 + q_hat)`.
pub fn loss_fnw<R: Real>(
    theta: &CvrModel<R>,
    x: &FeatureVector,
    y_obs: bool,
    grad: &mut CvrGrad<R>,
) -> Result<f64> {
    let fwd = theta.forward(x);
    let q_hat = fwd.p;
    let w = if y_obs { 1.0 + q_hat } else { (1.0 - q_hat) * (1.0 + q_hat) };
    let (bce, d_logit) = bce_parts(fwd.logit, fwd.p, y_obs);
    theta.accumulate_grad(x, &fwd, w * d_logit, grad)?;
    check_finite(w * bce, "fnw loss")
}

/// Importance-weighted loss for the elapsed-window duplicated stream.
///
/// `aux_dp` predicts the duplicate-positive rate (conversion after the
/// window, among observed negatives) and `aux_in` the in-window conversion
/// rate; both are frozen here. With `d_hat = p_dp (1 - p_in)`, positives
/// weigh `1 + d_hat` and negatives `(1 + d_hat)(1 - p_dp)`.
pub fn loss_esdfm<R: Real>(
    theta: &CvrModel<R>,
    aux_dp: &CvrModel<R>,
    aux_in: &CvrModel<R>,
    x: &FeatureVector,
    y_obs: bool,
    grad: &mut CvrGrad<R>,
) -> Result<f64> {
    let fwd = theta.forward(x);
    let p_dp = aux_dp.predict_cvr(x);
    let p_in = aux_in.predict_cvr(x);
    let d_hat = p_dp * (1.0 - p_in);
    let w = if y_obs { 1.0 + d_hat } else { (1.0 + d_hat) * (1.0 - p_dp) };
    let (bce, d_logit) = bce_parts(fwd.logit, fwd.p, y_obs);
    theta.accumulate_grad(x, &fwd, w * d_logit, grad)?;
    check_finite(w * bce, "esdfm loss")
}
