//! AdamW with decoupled weight decay and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TurboError};
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, clip_norm: Some(1.0) }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0f32; t.numel()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Only matrices decay; biases, norms, CLS and mask tokens do not.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// One update from the gradients currently held in `params`.
pub fn adamw_step(params: &mut ParamStore<f32>, state: &mut OptimState, opt: &AdamW, lr: f64) -> Result<UpdateStats> {
    let mut sq = 0f64;
    for (name, _, g) in params.entries_mut() {
        for &x in g.data() {
            if !x.is_finite() {
                return Err(TurboError::NonFinite(format!("gradient of {name} contains {x}")));
            }
            sq += f64::from(x) * f64::from(x);
        }
    }
    let grad_norm = sq.sqrt();
    let scale = match opt.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (_, value, grad)) in params.entries_mut().enumerate() {
        let decay = if decays(value.shape()) { 1.0 - lr * opt.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = f64::from(g) * scale;
            let mn = b1 * f64::from(*m) + (1.0 - b1) * g;
            let vn = b2 * f64::from(*v) + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = (mn / c1) / ((vn / c2).sqrt() + opt.eps);
            *w = (f64::from(*w) * decay - lr * update) as f32;
        }
    }
    Ok(UpdateStats { grad_norm, clipped: scale < 1.0 })
}
