//! Analytic compute, parameter and activation-memory counts.
//!
//! One multiply-accumulate counts as one FLOP. Softmax, normalization,
//! activation and bias arithmetic are left out.

use serde::Serialize;

use crate::error::Result;
use crate::model::TurboConfig;
use crate::partition::partition_sizes;

/// MACs of one transformer block at sequence length `len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockCost {
    pub len: usize,
    pub width: usize,
    /// q, k, v and output projections: `4 L D²`.
    pub proj: u64,
    /// Scores and weighted sum: `2 L² D`.
    pub attn: u64,
    /// Two MLP layers: `2 ratio L D²`.
    pub mlp: u64,
}

impl BlockCost {
    pub fn new(len: usize, width: usize, mlp_ratio: usize) -> Self {
        let (l, d) = (len as u64, width as u64);
        Self { len, width, proj: 4 * l * d * d, attn: 2 * l * l * d, mlp: 2 * mlp_ratio as u64 * l * d * d }
    }

    pub fn total(&self) -> u64 {
        self.proj + self.attn + self.mlp
    }
}

/// Per-video cost of one forward pass at a given `(m, r)`.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub mask_ratio: f64,
    pub recon_ratio: f64,
    pub visible: usize,
    pub recon: usize,
    pub embed_macs: u64,
    pub encoder_macs: u64,
    pub decoder_macs: u64,
    pub head_macs: u64,
    pub total_macs: u64,
    pub encoder_blocks: Vec<BlockCost>,
    pub decoder_blocks: Vec<BlockCost>,
    pub param_count: usize,
    /// Stored forward activations of one video, in scalars.
    pub activation_floats: u64,
}

fn giga(macs: u64) -> f64 {
    macs as f64 / 1e9
}

impl CostReport {
    pub fn embed_gflops(&self) -> f64 {
        giga(self.embed_macs)
    }

    pub fn encoder_gflops(&self) -> f64 {
        giga(self.encoder_macs)
    }

    pub fn decoder_gflops(&self) -> f64 {
        giga(self.decoder_macs)
    }

    pub fn head_gflops(&self) -> f64 {
        giga(self.head_macs)
    }

    pub fn total_gflops(&self) -> f64 {
        giga(self.total_macs)
    }

    /// Activation footprint in megabytes of 32-bit floats.
    pub fn activation_mb(&self) -> f64 {
        self.activation_floats as f64 * 4.0 / 1e6
    }
}

/// Scalars kept for backward by one block: the block input, both norm
/// outputs, q/k/v, context, the mid-block residual, the MLP hidden layer
/// before and after the activation (`(6 + 2 ratio) L D`), plus `heads` score
/// matrices of `L²`.
pub fn block_activations(len: usize, width: usize, heads: usize, mlp_ratio: usize) -> u64 {
    let (l, d) = (len as u64, width as u64);
    (6 + 2 * mlp_ratio as u64) * l * d + heads as u64 * l * l
}

pub fn flops_estimate(config: &TurboConfig, mask_ratio: f64, recon_ratio: f64) -> Result<CostReport> {
    let c = config;
    let n = c.n_tokens();
    let (n_i, n_r, _) = partition_sizes(n, mask_ratio, recon_ratio)?;
    let (d, p) = (c.enc_dim as u64, c.geometry.patch_dim() as u64);

    let embed_macs = n_i as u64 * p * d;
    let encoder_blocks: Vec<BlockCost> = (0..c.enc_depth).map(|_| BlockCost::new(n_i + 1, c.enc_dim, c.mlp_ratio)).collect();
    let encoder_macs = encoder_blocks.iter().map(BlockCost::total).sum();
    let mut activation_floats = n_i as u64 * p
        + c.enc_depth as u64 * block_activations(n_i + 1, c.enc_dim, c.enc_heads, c.mlp_ratio);

    let (decoder_blocks, decoder_macs) = if n_r > 0 && c.dec_depth > 0 {
        let ld = n_i + n_r;
        let dd = c.dec_dim as u64;
        let blocks: Vec<BlockCost> = (0..c.dec_depth).map(|_| BlockCost::new(ld, c.dec_dim, c.mlp_ratio)).collect();
        let io = ld as u64 * d * dd + ld as u64 * dd * p;
        activation_floats += ld as u64 * d
            + c.dec_depth as u64 * block_activations(ld, c.dec_dim, c.dec_heads, c.mlp_ratio)
            + ld as u64 * dd;
        let macs = blocks.iter().map(BlockCost::total).sum::<u64>() + io;
        (blocks, macs)
    } else {
        (Vec::new(), 0)
    };

    let head_macs = if c.task.uses_classifier() {
        d * c.num_classes as u64
    } else {
        d * d + d * c.proj_dim as u64
    };

    Ok(CostReport {
        mask_ratio,
        recon_ratio,
        visible: n_i,
        recon: n_r,
        embed_macs,
        encoder_macs,
        decoder_macs,
        head_macs,
        total_macs: embed_macs + encoder_macs + decoder_macs + head_macs,
        encoder_blocks,
        decoder_blocks,
        param_count: param_count(config),
        activation_floats,
    })
}

/// Stored activations for a batch of `batch` videos.
pub fn activation_memory(config: &TurboConfig, mask_ratio: f64, recon_ratio: f64, batch: usize) -> Result<u64> {
    Ok(flops_estimate(config, mask_ratio, recon_ratio)?.activation_floats * batch as u64)
}

fn linear_params(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

fn block_params(dim: usize, mlp_ratio: usize) -> usize {
    let hidden = dim * mlp_ratio;
    2 * 2 * dim + 4 * linear_params(dim, dim) + linear_params(dim, hidden) + linear_params(hidden, dim)
}

/// Closed-form count of every trainable scalar of the model built from `config`.
pub fn param_count(config: &TurboConfig) -> usize {
    let c = config;
    let (d, p) = (c.enc_dim, c.geometry.patch_dim());
    let mut total = linear_params(p, d) + d + c.enc_depth * block_params(d, c.mlp_ratio) + 2 * d;
    if c.dec_depth > 0 {
        let dd = c.dec_dim;
        total += linear_params(d, dd) + dd + c.dec_depth * block_params(dd, c.mlp_ratio) + 2 * dd + linear_params(dd, p);
    }
    if c.task.uses_classifier() {
        total += linear_params(d, c.num_classes);
    } else {
        total += linear_params(d, d) + linear_params(d, c.proj_dim);
        total += linear_params(c.text_dim, d) + linear_params(d, c.proj_dim);
    }
    total
}

pub fn sweep(config: &TurboConfig, pairs: &[(f64, f64)]) -> Result<Vec<CostReport>> {
    pairs.iter().map(|&(m, r)| flops_estimate(config, m, r)).collect()
}

pub const CSV_HEADER: &str = "mask_pct,recon_pct,encoder_gflops,decoder_gflops,total_gflops,activation_mb";

fn pct(x: f64) -> String {
    format!("{}", (x * 1000.0).round() / 10.0)
}

/// Header plus one line per report.
pub fn sweep_csv(reports: &[CostReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{:.3},{:.3}\n",
            pct(r.mask_ratio),
            pct(r.recon_ratio),
            r.encoder_gflops(),
            r.decoder_gflops(),
            r.total_gflops(),
            r.activation_mb()
        ));
    }
    out
}

/// The `(m, r)` settings of the speed/accuracy trade-off table.
pub const TRADE_OFF_PAIRS: [(f64, f64); 6] = [(0.0, 0.0), (0.5, 0.5), (0.75, 0.75), (0.75, 0.25), (0.9, 0.9), (0.9, 0.1)];
