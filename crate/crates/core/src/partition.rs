//! Three-way split of patch tokens into visible, reconstruction targets and
//! ignored tokens.
//!
//! With mask ratio `m` and reconstruction ratio `r <= m`, the encoder sees
//! `floor(n(1-m))` tokens, the decoder predicts `floor(n r)` of the hidden
//! ones, and the remainder takes no part in the step. `r = m` is plain masked
//! autoencoding and reconstructs all hidden tokens; `m = r = 0` is ordinary
//! full-token training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TurboError};
use crate::patch::TokenBatch;
use crate::rng::rng_from;
use crate::tensor::{Real, Tensor};

// Products like 64 * (1 - 0.875) must floor to the exact integer.
const FLOOR_SLACK: f64 = 1e-9;

fn floor_count(x: f64) -> usize {
    (x + FLOOR_SLACK).floor().max(0.0) as usize
}

/// Validates `0 <= r <= m <= 1`.
pub fn check_ratios(mask_ratio: f64, recon_ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mask_ratio) || !(0.0..=1.0).contains(&recon_ratio) {
        return Err(TurboError::Constraint(format!(
            "ratios must lie in [0,1], got m={mask_ratio} r={recon_ratio}"
        )));
    }
    if recon_ratio > mask_ratio {
        return Err(TurboError::Constraint(format!(
            "r ≤ m required, got r={recon_ratio} > m={mask_ratio}"
        )));
    }
    Ok(())
}

/// A downstream head needs at least one visible content token per step.
pub fn check_downstream(mask_ratio: f64) -> Result<()> {
    if mask_ratio >= 1.0 {
        return Err(TurboError::Config(
            "mask ratio 1 leaves no visible content tokens for the downstream head".into(),
        ));
    }
    Ok(())
}

/// `(N_i, N_r, N_ignore)` for `n` tokens.
pub fn partition_sizes(n: usize, mask_ratio: f64, recon_ratio: f64) -> Result<(usize, usize, usize)> {
    check_ratios(mask_ratio, recon_ratio)?;
    let visible = floor_count(n as f64 * (1.0 - mask_ratio)).min(n);
    // r = m is plain masked autoencoding: every hidden token is a target,
    // even when the two floors would leave one over
    let recon = if recon_ratio == mask_ratio { n - visible } else { floor_count(n as f64 * recon_ratio).min(n - visible) };
    Ok((visible, recon, n - visible - recon))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n: usize,
    pub mask_ratio: f64,
    pub recon_ratio: f64,
    pub visible: Vec<usize>,
    pub recon: Vec<usize>,
    pub ignored: Vec<usize>,
    pub seed: u64,
}

/// Uniform random partition: shuffle `0..n`, then take visible, recon, ignored
/// in that order.
pub fn make_partition(n: usize, mask_ratio: f64, recon_ratio: f64, seed: u64) -> Result<PartitionPlan> {
    if n == 0 {
        return Err(TurboError::Geometry("cannot partition zero tokens".into()));
    }
    let (nv, nr, _) = partition_sizes(n, mask_ratio, recon_ratio)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from(seed));
    let ignored = perm.split_off(nv + nr);
    let recon = perm.split_off(nv);
    Ok(PartitionPlan { n, mask_ratio, recon_ratio, visible: perm, recon, ignored, seed })
}

impl PartitionPlan {
    /// Plan that keeps every token visible, in order.
    pub fn full(n: usize) -> Self {
        Self {
            n,
            mask_ratio: 0.0,
            recon_ratio: 0.0,
            visible: (0..n).collect(),
            recon: vec![],
            ignored: vec![],
            seed: 0,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.visible.len(), self.recon.len(), self.ignored.len())
    }

    /// Visible token positions in the full sequence (CLS = 0), CLS included.
    pub fn visible_positions_with_cls(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.visible.iter().map(|&i| i + 1)).collect()
    }
}

/// Selects the encoder input (`[1 + N_i, D]`, CLS first) from an embedded
/// sequence and the raw patch rows at the reconstruction positions.
pub fn apply_partition<F: Real>(
    tokens: &TokenBatch<F>,
    patches: &Tensor<F>,
    plan: &PartitionPlan,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let n = tokens.geometry.n();
    let emb = tokens.embeddings.shape();
    if plan.n != n || emb.len() != 3 || emb[0] != 1 || emb[1] != n + 1 || patches.shape()[0] != n {
        return Err(TurboError::Geometry(format!(
            "plan over {} tokens does not match token batch {:?} / patches {:?}",
            plan.n,
            emb,
            patches.shape()
        )));
    }
    let d = emb[2];
    let mut vis = Vec::with_capacity((plan.visible.len() + 1) * d);
    for i in plan.visible_positions_with_cls() {
        vis.extend_from_slice(&tokens.embeddings.data()[i * d..(i + 1) * d]);
    }
    let p = patches.shape()[1];
    let mut tgt = Vec::with_capacity(plan.recon.len() * p);
    for &i in &plan.recon {
        tgt.extend_from_slice(patches.row(i));
    }
    Ok((
        Tensor::new(vec![plan.visible.len() + 1, d], vis)?,
        Tensor::new(vec![plan.recon.len(), p], tgt)?,
    ))
}
