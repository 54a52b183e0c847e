use super::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters (learning rate is passed per step).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Moments {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Moments {
            first: params.iter().map(Tensor::zeros_like).collect(),
            second: params.iter().map(Tensor::zeros_like).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam update. `step` counts from 1.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if step == 0 {
        return Err(Error::Config("optimizer step counts from 1".into()));
    }
    if params.len() != grads.len()
        || params.len() != moments.first.len()
        || params.len() != moments.second.len()
    {
        return Err(Error::shape("adamw_step", "parameter/gradient/moment count"));
    }
    for (i, p) in params.iter().enumerate() {
        let s = p.shape();
        if grads[i].shape() != s || moments.first[i].shape() != s || moments.second[i].shape() != s {
            return Err(Error::shape("adamw_step", format!("tensor {i} shape {s:?}")));
        }
    }

    let t = step as i32;
    let bias1 = 1.0 - hp.beta1.powi(t);
    let bias2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = moments.first[i].data_mut();
        let v = moments.second[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}
