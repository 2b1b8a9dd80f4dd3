//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl OptState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Array>) -> Self {
        let m: Vec<Array> = shapes.into_iter().map(|a| Array::zeros(a.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One AdamW update. `decay[k]` selects which tensors get weight decay;
/// `names` label tensors in diagnostics.
pub fn adamw_step(
    params: &mut [&mut Array],
    grads: &[Array],
    decay: &[bool],
    names: &[String],
    opt: &mut OptState,
    hp: &AdamParams,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || names.len() != n || opt.m.len() != n {
        return Err(Error::shape("adamw_step", "parameter, gradient and state counts differ"));
    }
    for (k, g) in grads.iter().enumerate() {
        if g.shape() != params[k].shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{}: gradient {:?} vs parameter {:?}", names[k], g.shape(), params[k].shape()),
            ));
        }
        if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient in tensor {} at element {pos}",
                names[k]
            )));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for k in 0..n {
        let p = params[k].data_mut();
        let (m, v) = (opt.m[k].data_mut(), opt.v[k].data_mut());
        let shrink = if decay[k] { 1.0 - hp.lr * hp.weight_decay } else { 1.0 };
        for (((x, &g), mk), vk) in p.iter_mut().zip(grads[k].data()).zip(m).zip(v) {
            *x *= shrink;
            *mk = hp.beta1 * *mk + (1.0 - hp.beta1) * g;
            *vk = hp.beta2 * *vk + (1.0 - hp.beta2) * g * g;
            let mhat = *mk / bc1;
            let vhat = *vk / bc2;
            *x -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
