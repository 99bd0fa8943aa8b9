//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("adamw", "hyperparameters out of range"))
        }
    }
}

/// First and second moments for each parameter tensor, plus the number of
/// steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = |p: &&Tensor| Tensor::from_parts(p.shape().to_vec(), alloc::vec![0.0; p.numel()]);
        OptState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }
}

fn mismatch(p: &Tensor, other: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: "adamw_step",
        left: p.shape().to_vec(),
        right: other.shape().to_vec(),
    }
}

/// One AdamW update applied in place: `p -= lr * wd * p`, then the
/// bias-corrected Adam step. Only the tensors passed in are touched.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptState, hyper: &AdamW) -> Result<()> {
    hyper.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::invalid("adamw_step", "parameter, gradient and state counts differ"));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.shape() != g.shape() {
            return Err(mismatch(p, g));
        }
        if p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(mismatch(p, m));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(hyper.beta1, t);
    let bc2 = 1.0 - libm::pow(hyper.beta2, t);
    let decay = 1.0 - hyper.lr * hyper.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w *= decay;
            *w -= hyper.lr * m_hat / (math::sqrt(v_hat) + hyper.eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid("clip_global_norm", "max_norm must be > 0"));
    }
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
    let norm = math::sqrt(sq);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi step / total)) / 2` for
/// `0 <= step <= total`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(
            "cosine_lr",
            alloc::format!("step {step} outside 0..={total_steps}"),
        ));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let phase = core::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math::cos(phase)))
}
