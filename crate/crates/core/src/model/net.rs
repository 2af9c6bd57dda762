use crate::error::{Result, TurboError};
use crate::partition::{check_downstream, PartitionPlan};
use crate::patch::{embed_graph, sinusoidal_table};
use crate::rng::{rng_from, Rng};
use crate::tensor::{Real, Tensor, Var};

use super::config::TurboConfig;
use super::params::{trunc_normal, ParamId, ParamStore, Session};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

#[derive(Clone, Debug)]
struct Decoder {
    embed: Linear,
    mask_token: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    pred: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    cls_token: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    decoder: Option<Decoder>,
    head: Option<Linear>,
    proj_visual: Option<(Linear, Linear)>,
    proj_text: Option<(Linear, Linear)>,
}

struct Builder<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut Rng,
}

impl<F: Real> Builder<'_, F> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let weight = self.store.add(&format!("{name}.weight"), trunc_normal(&[fan_in, fan_out], INIT_STD, self.rng));
        let bias = self.store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        let gain = self.store.add(&format!("{name}.weight"), Tensor::full(&[dim], F::one()));
        let bias = self.store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]));
        Norm { gain, bias }
    }

    fn block(&mut self, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Block {
        Block {
            norm1: self.norm(&format!("{name}.norm1"), dim),
            q: self.linear(&format!("{name}.attn.q"), dim, dim),
            k: self.linear(&format!("{name}.attn.k"), dim, dim),
            v: self.linear(&format!("{name}.attn.v"), dim, dim),
            proj: self.linear(&format!("{name}.attn.proj"), dim, dim),
            norm2: self.norm(&format!("{name}.norm2"), dim),
            fc1: self.linear(&format!("{name}.mlp.fc1"), dim, dim * mlp_ratio),
            fc2: self.linear(&format!("{name}.mlp.fc2"), dim * mlp_ratio, dim),
            heads,
        }
    }
}

/// Encoder, light decoder and task heads with their parameters.
#[derive(Clone, Debug)]
pub struct TurboNet<F: Real = f32> {
    pub config: TurboConfig,
    pub params: ParamStore<F>,
    layout: Layout,
}

/// Outputs of one visual forward pass.
pub struct VisualOutput {
    /// Encoder output `[B, N_i + 1, D]`, CLS at index 0.
    pub encoded: Var,
    /// Final-layer CLS feature `[B, D]`.
    pub z_cls: Var,
    /// Decoder predictions `[B, N_r, P]`, absent when nothing is reconstructed.
    pub predicted: Option<Var>,
}

impl<F: Real> TurboNet<F> {
    pub fn new(config: TurboConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed);
        let c = &config;
        let (d, p) = (c.enc_dim, c.geometry.patch_dim());
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let patch_embed = b.linear("encoder.patch_embed", p, d);
        let cls_token = b.store.add("encoder.cls_token", trunc_normal(&[d], INIT_STD, b.rng));
        let blocks = (0..c.enc_depth)
            .map(|i| b.block(&format!("encoder.blocks.{i}"), d, c.enc_heads, c.mlp_ratio))
            .collect();
        let norm = b.norm("encoder.norm", d);
        let decoder = (c.dec_depth > 0).then(|| {
            let dd = c.dec_dim;
            Decoder {
                embed: b.linear("decoder.embed", d, dd),
                mask_token: b.store.add("decoder.mask_token", trunc_normal(&[dd], INIT_STD, b.rng)),
                blocks: (0..c.dec_depth)
                    .map(|i| b.block(&format!("decoder.blocks.{i}"), dd, c.dec_heads, c.mlp_ratio))
                    .collect(),
                norm: b.norm("decoder.norm", dd),
                pred: b.linear("decoder.pred", dd, p),
            }
        });
        let head = c.task.uses_classifier().then(|| b.linear("head", d, c.num_classes));
        let (proj_visual, proj_text) = if c.task.uses_classifier() {
            (None, None)
        } else {
            (
                Some((b.linear("proj_visual.fc1", d, d), b.linear("proj_visual.fc2", d, c.proj_dim))),
                Some((b.linear("proj_text.fc1", c.text_dim, d), b.linear("proj_text.fc2", d, c.proj_dim))),
            )
        };
        let layout = Layout { patch_embed, cls_token, blocks, norm, decoder, head, proj_visual, proj_text };
        Ok(Self { config, params: store, layout })
    }

    /// Same model in another precision.
    pub fn cast<G: Real>(&self) -> TurboNet<G> {
        TurboNet { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    // ------------------------------------------------------------- layers

    fn linear(&self, s: &mut Session<F>, l: Linear, x: Var) -> Result<Var> {
        let (w, b) = (s.p(l.weight), s.p(l.bias));
        let y = s.g.matmul(x, w)?;
        s.g.add(y, b)
    }

    fn norm(&self, s: &mut Session<F>, n: Norm, x: Var) -> Result<Var> {
        let (gain, bias) = (s.p(n.gain), s.p(n.bias));
        s.g.layernorm(x, gain, bias, LN_EPS)
    }

    fn attention(&self, s: &mut Session<F>, blk: &Block, x: Var) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let h = blk.heads;
        let dh = d / h;
        let split = |s: &mut Session<F>, t: Var| -> Result<Var> {
            s.g.rearrange(t, &[b, l, h, dh], &[0, 2, 1, 3], &[b, h, l, dh])
        };
        let q = self.linear(s, blk.q, x)?;
        let q = s.g.scale(q, F::c(1.0 / (dh as f64).sqrt()));
        let q = split(s, q)?;
        let k = self.linear(s, blk.k, x)?;
        let k = split(s, k)?;
        let v = self.linear(s, blk.v, x)?;
        let v = split(s, v)?;
        let scores = s.g.matmul_t(q, k, false, true)?;
        let attn = s.g.softmax(scores, -1)?;
        let ctx = s.g.matmul(attn, v)?;
        let ctx = s.g.rearrange(ctx, &[b, h, l, dh], &[0, 2, 1, 3], &[b, l, d])?;
        self.linear(s, blk.proj, ctx)
    }

    /// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
    fn block(&self, s: &mut Session<F>, blk: &Block, x: Var) -> Result<Var> {
        let h = self.norm(s, blk.norm1, x)?;
        let a = self.attention(s, blk, h)?;
        let x = s.g.add(x, a)?;
        let h = self.norm(s, blk.norm2, x)?;
        let h = self.linear(s, blk.fc1, h)?;
        let h = s.g.gelu(h);
        let h = self.linear(s, blk.fc2, h)?;
        s.g.add(x, h)
    }

    // ------------------------------------------------------------ encoder

    /// Embeds the visible patches of each sample and prepends CLS.
    ///
    /// `patches` is `[B, n, P]`; every plan in the batch must share sizes.
    /// Positional encodings follow the full-sequence index, so this equals
    /// embedding all tokens and then selecting the visible ones.
    pub fn visible_tokens(&self, s: &mut Session<F>, patches: &Tensor<F>, plans: &[PartitionPlan]) -> Result<Var> {
        let shape = patches.shape();
        let n = self.config.n_tokens();
        if shape.len() != 3 || shape[1] != n || shape[2] != self.config.geometry.patch_dim() {
            return Err(TurboError::Geometry(format!(
                "expected patches [B, {}, {}], got {:?}",
                n,
                self.config.geometry.patch_dim(),
                shape
            )));
        }
        check_batch_plans(plans, shape[0], n)?;
        let x = s.g.constant(patches.clone());
        let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let x = s.g.gather_rows_batched(x, &visible)?;
        let pe = sinusoidal_table::<F>(n + 1, self.config.enc_dim);
        let positions: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.iter().map(|&i| i + 1).collect()).collect();
        let (w, b, cls) = (s.p(self.layout.patch_embed.weight), s.p(self.layout.patch_embed.bias), s.p(self.layout.cls_token));
        embed_graph(&mut s.g, x, w, b, cls, &pe, &positions)
    }

    /// Transformer blocks and the final norm over `[B, L, D]`; any `L >= 1`.
    pub fn encoder_forward(&self, s: &mut Session<F>, tokens: Var) -> Result<Var> {
        let shape = s.g.shape(tokens);
        if shape.len() != 3 || shape[2] != self.config.enc_dim {
            return Err(TurboError::Config(format!(
                "encoder expects [B, L, {}], got {:?}",
                self.config.enc_dim, shape
            )));
        }
        let mut x = tokens;
        for blk in &self.layout.blocks {
            x = self.block(s, blk, x)?;
        }
        self.norm(s, self.layout.norm, x)
    }

    /// Row 0 of the encoder output, `[B, D]`.
    pub fn cls_feature(&self, s: &mut Session<F>, encoded: Var) -> Result<Var> {
        let b = s.g.shape(encoded)[0];
        let z = s.g.gather_rows(encoded, &[0])?;
        s.g.reshape(z, &[b, self.config.enc_dim])
    }

    /// Decoder over the encoded visible tokens (CLS dropped) followed by one
    /// mask-token slot per reconstruction target; `N_i + N_r` tokens in all.
    /// Returns predictions `[B, N_r, P]` in `plan.recon` order, or `None`
    /// when there is nothing to reconstruct.
    pub fn decoder_forward(&self, s: &mut Session<F>, encoded: Var, plans: &[PartitionPlan]) -> Result<Option<Var>> {
        let nr = plans.first().map_or(0, |p| p.recon.len());
        if nr == 0 {
            return Ok(None);
        }
        let dec = self.layout.decoder.as_ref().ok_or_else(|| TurboError::Config("model has no decoder".into()))?;
        let shape = s.g.shape(encoded).to_vec();
        let (b, l) = (shape[0], shape[1]);
        let ni = l - 1;
        let n = self.config.n_tokens();
        check_batch_plans(plans, b, n)?;
        if plans[0].visible.len() != ni {
            return Err(TurboError::Geometry(format!(
                "plan has {} visible tokens but encoder produced {}",
                plans[0].visible.len(),
                ni
            )));
        }
        let dd = self.config.dec_dim;
        let content = s.g.gather_rows(encoded, &(1..l).collect::<Vec<_>>())?;
        let content = self.linear(s, dec.embed, content)?;
        let ones = s.g.constant(Tensor::full(&[b * nr, 1], F::one()));
        let mask = s.p(dec.mask_token);
        let mask = s.g.reshape(mask, &[1, dd])?;
        let slots = s.g.matmul(ones, mask)?;
        let slots = s.g.reshape(slots, &[b, nr, dd])?;
        let seq = s.g.concat(&[content, slots], 1)?;
        let pe = sinusoidal_table::<F>(n + 1, dd);
        let mut pe_rows = Vec::with_capacity(b * (ni + nr) * dd);
        for plan in plans {
            for &i in plan.visible.iter().chain(&plan.recon) {
                pe_rows.extend_from_slice(pe.row(i + 1));
            }
        }
        let pe = s.g.constant(Tensor::new(vec![b, ni + nr, dd], pe_rows)?);
        let mut x = s.g.add(seq, pe)?;
        for blk in &dec.blocks {
            x = self.block(s, blk, x)?;
        }
        let x = self.norm(s, dec.norm, x)?;
        let slots = s.g.gather_rows(x, &(ni..ni + nr).collect::<Vec<_>>())?;
        self.linear(s, dec.pred, slots).map(Some)
    }

    /// Full visual path: embed visible tokens, encode, decode.
    pub fn forward_visual(&self, s: &mut Session<F>, patches: &Tensor<F>, plans: &[PartitionPlan]) -> Result<VisualOutput> {
        let tokens = self.visible_tokens(s, patches, plans)?;
        let encoded = self.encoder_forward(s, tokens)?;
        let z_cls = self.cls_feature(s, encoded)?;
        let predicted = self.decoder_forward(s, encoded, plans)?;
        Ok(VisualOutput { encoded, z_cls, predicted })
    }

    // -------------------------------------------------------------- heads

    /// Single linear classifier on the CLS feature.
    pub fn classify_head(&self, s: &mut Session<F>, z_cls: Var) -> Result<Var> {
        let head = self.layout.head.ok_or_else(|| TurboError::Config("model has no classifier head".into()))?;
        self.linear(s, head, z_cls)
    }

    fn mlp_projection(&self, s: &mut Session<F>, (fc1, fc2): (Linear, Linear), x: Var) -> Result<Var> {
        let h = self.linear(s, fc1, x)?;
        let h = s.g.gelu(h);
        let z = self.linear(s, fc2, h)?;
        if self.config.normalize_embeddings {
            s.g.l2_normalize(z)
        } else {
            Ok(z)
        }
    }

    pub fn project_visual(&self, s: &mut Session<F>, z_cls: Var) -> Result<Var> {
        let heads = self.layout.proj_visual.ok_or_else(|| TurboError::Config("model has no projection heads".into()))?;
        self.mlp_projection(s, heads, z_cls)
    }

    pub fn project_text(&self, s: &mut Session<F>, text_feat: Var) -> Result<Var> {
        let heads = self.layout.proj_text.ok_or_else(|| TurboError::Config("model has no projection heads".into()))?;
        self.mlp_projection(s, heads, text_feat)
    }

    /// Parameter names of one encoder block, for per-block diagnostics.
    pub fn encoder_block_prefixes(&self) -> Vec<String> {
        (0..self.config.enc_depth).map(|i| format!("encoder.blocks.{i}.")).collect()
    }
}

fn check_batch_plans(plans: &[PartitionPlan], batch: usize, n: usize) -> Result<()> {
    if plans.len() != batch {
        return Err(TurboError::Geometry(format!("{} plans for a batch of {}", plans.len(), batch)));
    }
    let Some(first) = plans.first() else {
        return Err(TurboError::Geometry("empty batch".into()));
    };
    for p in plans {
        if p.n != n {
            return Err(TurboError::Geometry(format!("plan over {} tokens, model has {}", p.n, n)));
        }
        if p.visible.len() != first.visible.len() || p.recon.len() != first.recon.len() {
            return Err(TurboError::Geometry("plans in one batch must share partition sizes".into()));
        }
    }
    Ok(())
}

/// Checks that a downstream head can run with this mask ratio.
pub fn check_inference_ratio(mask_ratio: f64) -> Result<()> {
    check_downstream(mask_ratio)
}

/// Reconstruction targets `[B, N_r, P]`: raw patch rows at each plan's
/// reconstruction positions, optionally standardized per row (eps 1e-6).
pub fn pmae_targets<F: Real>(patches: &Tensor<F>, plans: &[PartitionPlan], normalize: bool) -> Result<Tensor<F>> {
    let shape = patches.shape();
    let (n, p) = (shape[1], shape[2]);
    let nr = plans.first().map_or(0, |pl| pl.recon.len());
    let mut out = Vec::with_capacity(plans.len() * nr * p);
    for (bi, plan) in plans.iter().enumerate() {
        for &i in &plan.recon {
            let row = &patches.data()[(bi * n + i) * p..(bi * n + i + 1) * p];
            if normalize {
                out.extend(normalize_row(row));
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![plans.len(), nr, p], out)
}

/// `(x - mean) / sqrt(var + 1e-6)` using the row's own statistics.
pub fn normalize_row<F: Real>(row: &[F]) -> Vec<F> {
    let n = F::c(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv = F::one() / (var + F::c(1e-6)).sqrt();
    row.iter().map(|&v| (v - mean) * inv).collect()
}
